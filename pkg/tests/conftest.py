import pytest

from synnet import data
from synnet.model import Topology, build_model
from synnet.tensor import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def tiny_topology():
    return Topology('siso', depth=2, channels=(3, 4), head_width=3)


@pytest.fixture
def tiny_model(tiny_topology):
    return build_model(tiny_topology, RngStream(7), 'double')


@pytest.fixture
def phantoms():
    """Ten in-memory 16x16 phantoms."""
    return data.Dataset.from_samples(
        [data.generate_phantom(i, 16, 16, sample_id='p%02d' % i) for i in range(10)])


@pytest.fixture
def dataset_dir(tmp_path):
    root = str(tmp_path / 'phantoms')
    data.write_dataset(root, 10, 16, 16, seed=5)
    return root


SMALL_CONFIG = """\
# tiny graph for fast runs
depth = 2
channels = 4,8
head_width = 4
batch_size = 32
ssim_window = 5
lr = 0.001
"""


@pytest.fixture
def config_file(tmp_path):
    def write(extra='', name='run.cfg'):
        path = tmp_path / name
        path.write_text(SMALL_CONFIG + extra)
        return str(path)
    return write
