import dataclasses

import numpy as np
import pytest

from synnet import defaults, layers
from synnet.exceptions import CheckpointError, ConfigError
from synnet.model import SynNetModel, Topology, build_model
from synnet.optim import OptimState, sgd_step
from synnet.persist import (
    Checkpoint,
    RunConfig,
    format_config,
    load_checkpoint,
    load_config,
    parse_config,
    save_checkpoint,
)
from synnet.tensor import RngStream


class TestParseConfig:

    def test_empty_text_gives_defaults(self):
        cfg = parse_config('')
        assert cfg == RunConfig()
        assert cfg.channels == (32, 64, 64)
        assert cfg.input_modalities == ('t1',) and cfg.output_modalities == ('t2',)

    def test_overrides_and_comments(self):
        cfg = parse_config('# header\n\nlr = 0.05  # faster\nchannels = 8, 16, 16\naugment = no\n')
        assert cfg.lr == 0.05
        assert cfg.channels == (8, 16, 16)
        assert cfg.augment is False

    def test_mimo_modalities_default_per_topology(self):
        cfg = parse_config('topology = mimo\n')
        assert cfg.input_modalities == ('t1', 't1c')
        assert cfg.output_modalities == ('t2', 'flair')

    @pytest.mark.parametrize('text', ['true', 'YES', '1'])
    def test_true_spellings(self, text):
        assert parse_config('shuffle = %s\n' % text).shuffle is True

    @pytest.mark.parametrize('text,lineno', [
        ('lr = 0.1\nlearning_rate = 0.1\n', 2),
        ('depth = 2\nchannels = 4,8\nbatch_size = many\n', 3),
        ('\n\nthis line has no equals\n', 3),
        ('seed = 1\nseed = 2\n', 2),
        ('loss = l1\n', 1),
    ])
    def test_errors_name_the_line(self, text, lineno):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.lineno == lineno
        assert str(info.value).startswith('line %d:' % lineno)

    def test_cross_field_checks(self):
        with pytest.raises(ConfigError):
            parse_config('depth = 2\n')
        with pytest.raises(ConfigError):
            parse_config('topology = miso\ninput_modalities = t1\n')
        with pytest.raises(ConfigError):
            parse_config('output_modalities = pd\n')
        with pytest.raises(ConfigError):
            parse_config('momentum = 1.0\n')

    def test_format_parses_back(self):
        cfg = RunConfig(topology='miso', depth=2, channels=(4, 8), lr=0.1 + 0.2,
                        lambda4=3e-7, augment=False)
        assert parse_config(format_config(cfg)) == cfg

    def test_load_from_file(self, config_file):
        cfg = load_config(config_file('epochs = 3\n'))
        assert (cfg.depth, cfg.channels, cfg.epochs) == (2, (4, 8), 3)


@pytest.fixture
def tiny_config():
    return RunConfig(depth=2, channels=(3, 4), head_width=3)


def save_and_load(tmp_path, cp, name='model.ckpt'):
    path = str(tmp_path / name)
    save_checkpoint(path, cp)
    return path, load_checkpoint(path)


class TestCheckpoint:

    @pytest.mark.parametrize('precision', ['single', 'double'])
    def test_tensors_round_trip_bit_exact(self, tmp_path, tiny_config, precision):
        topology = Topology.from_config(tiny_config)
        _, params = build_model(topology, RngStream(2), precision)
        cp = Checkpoint.from_training(topology, params, config_text=format_config(tiny_config))
        path, loaded = save_and_load(tmp_path, cp)
        assert loaded.topology == topology
        assert list(loaded.tensors) == list(cp.tensors)
        for name, value in cp.tensors.items():
            assert loaded.tensors[name].dtype == value.dtype
            np.testing.assert_array_equal(loaded.tensors[name], value)
        again = str(tmp_path / 'again.ckpt')
        save_checkpoint(again, loaded)
        with open(path, 'rb') as a, open(again, 'rb') as b:
            assert a.read() == b.read()

    def test_loaded_model_predicts_identically(self, tmp_path, tiny_config, rng):
        topology = Topology.from_config(tiny_config)
        net, params = build_model(topology, RngStream(4), 'double')
        _, loaded = save_and_load(tmp_path, Checkpoint.from_training(
            topology, params, config_text=format_config(tiny_config)))
        x = rng.uniform(0, 1, (2, 1, 8, 8))
        expected, _ = net.forward(params, [x], layers.INFER)
        got, _ = SynNetModel(loaded.topology).forward(loaded.params(), [x], layers.INFER)
        np.testing.assert_array_equal(got[0], expected[0])

    def test_optimizer_state_survives(self, tmp_path, tiny_config):
        topology = Topology.from_config(tiny_config)
        _, params = build_model(topology, RngStream(5), 'double')
        state = OptimState.fresh(params, lr=0.1)
        grads = params.zeros_like()
        for name in grads:
            grads[name] = grads[name] + 0.5
        params, state = sgd_step(params, grads, state)
        cp = Checkpoint.from_training(topology, params, state, epoch=3,
                                      config_text=format_config(tiny_config))
        _, loaded = save_and_load(tmp_path, cp)
        assert loaded.has_optimizer and loaded.epoch == 3
        restored = loaded.optim_state(lr=0.1)
        assert restored.iteration == 1
        for name, v in state.velocity.items():
            np.testing.assert_array_equal(restored.velocity[name], v)
        assert list(loaded.params()) == list(params)

    def test_plain_checkpoint_has_no_optimizer(self, tmp_path, tiny_config):
        topology = Topology.from_config(tiny_config)
        _, params = build_model(topology, RngStream(5))
        _, loaded = save_and_load(tmp_path, Checkpoint.from_training(
            topology, params, config_text=format_config(tiny_config)))
        assert loaded.optim_state() is None
        assert loaded.epoch == 0
        assert loaded.config == tiny_config

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.ckpt'
        path.write_bytes(b'NOTACKPT' + bytes(16))
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(str(path))
        assert info.value.field == 'magic'

    def test_unknown_version(self, tmp_path):
        path = tmp_path / 'v.ckpt'
        path.write_bytes(defaults.CHECKPOINT_MAGIC + (2).to_bytes(4, 'little') + bytes(16))
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(str(path))
        assert info.value.field == 'version'

    def test_truncation_names_the_field(self, tmp_path, tiny_config):
        topology = Topology.from_config(tiny_config)
        _, params = build_model(topology, RngStream(6))
        path, _ = save_and_load(tmp_path, Checkpoint.from_training(
            topology, params, config_text=format_config(tiny_config)))
        with open(path, 'rb') as fp:
            raw = fp.read()
        cut = tmp_path / 'cut.ckpt'
        cut.write_bytes(raw[:10])
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(str(cut))
        assert info.value.field == 'version'
        cut.write_bytes(raw[:-3])
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(str(cut))
        assert info.value.field == 'config'
        assert 'truncated' in str(info.value)

    def test_header_must_agree_with_config_echo(self, tmp_path, tiny_config):
        topology = Topology.from_config(tiny_config)
        _, params = build_model(topology, RngStream(6))
        other = dataclasses.replace(tiny_config, channels=(3, 5))
        with pytest.raises(CheckpointError) as info:
            save_and_load(tmp_path, Checkpoint.from_training(topology, params,
                                                            config_text=format_config(other)))
        assert info.value.field == 'topology'

    def test_narrow_head_without_skips_round_trips_with_config(self, tmp_path):
        cfg = RunConfig(depth=1, channels=(4,), head_width=4, skip_connections=False)
        topology = Topology.from_config(cfg)
        _, params = build_model(topology, RngStream(8), 'double')
        _, loaded = save_and_load(tmp_path, Checkpoint.from_training(
            topology, params, config_text=format_config(cfg)))
        assert loaded.topology == topology
        x = np.full((1, 1, 4, 4), 0.5)
        got, _ = SynNetModel(loaded.topology).forward(loaded.params(), [x], layers.INFER)
        assert got[0].shape == (1, 1, 4, 4)

    def test_header_alone_cannot_describe_the_tensors(self, tmp_path):
        topology = Topology(depth=1, channels=(4,), head_width=4, skip_connections=False)
        _, params = build_model(topology, RngStream(8))
        with pytest.raises(CheckpointError) as info:
            save_and_load(tmp_path, Checkpoint.from_training(topology, params))
        assert info.value.field == 'topology'
        # default head width and skips widen the decoder kernel from 4 to 8 inputs
        assert 'dec.arm0.block0.conv.weight' in str(info.value)

    @pytest.mark.parametrize('field', ['tensor[0].name', 'config'])
    def test_invalid_utf8(self, tmp_path, tiny_config, field):
        topology = Topology.from_config(tiny_config)
        _, params = build_model(topology, RngStream(6))
        path, _ = save_and_load(tmp_path, Checkpoint.from_training(
            topology, params, config_text=format_config(tiny_config)))
        with open(path, 'rb') as fp:
            raw = bytearray(fp.read())
        if field == 'config':
            raw[-1] = 0xff
        else:
            # first tensor name follows magic, version, topology header and tensor count
            raw[8 + 4 + 1 + 4 + 4 * topology.depth + 4 + 4] = 0xff
        bad = tmp_path / 'bad.ckpt'
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(str(bad))
        assert info.value.field == field
        assert 'UTF-8' in str(info.value)

    def test_unsupported_dtype(self, tmp_path):
        cp = Checkpoint(Topology(), {'x': np.zeros(2, dtype=np.int32)})
        with pytest.raises(CheckpointError):
            save_checkpoint(str(tmp_path / 'i.ckpt'), cp)
