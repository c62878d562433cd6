"""Batch command line: ``python -m synnet <command> [options]``.

Commands: gen-data, train, predict, eval, gradcheck, compare-losses.
Failures print one line ``synnet: error[<kind>]: <message>`` on stderr and
exit with status 2; ``gradcheck`` exits with 1 when a check fails.
"""
import argparse
import csv
import dataclasses
import logging
import sys

import numpy as np

from . import __version__, data, defaults, layers
from .exceptions import DataError, SynNetError, UsageError
from .metrics import format_metric, psnr, ssim_standard
from .model import SynNetModel, Topology, build_model, init_seed
from .optim import OptimState, TrainConfig, train
from .persist import Checkpoint, RunConfig, format_config, load_checkpoint, load_config, save_checkpoint
from .tensor import RngStream
from .utils import parse_size, str_to_list
from .verify import gradcheck_suite

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s [%(name)s] %(levelname)s: %(message)s'


def configure_logging(level='INFO'):
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, level.upper()), stream=sys.stderr)


def predict_images(net, params, inputs):
    """Infer-mode predictions for ``inputs`` of any size: pad, run, crop back."""
    padded = [data.pad_to_multiple(x, net.topology.factor) for x in inputs]
    record = padded[0][1]
    predictions, _ = net.forward(params, [x for x, _ in padded], layers.INFER)
    return [data.crop_back(p, record) for p in predictions]


def evaluate(net, params, dataset, cfg):
    """``(sample_id, head, psnr_db, ssim)`` per sample and synthesis head."""
    rows = []
    for sample in dataset:
        inputs = [sample[m] for m in cfg.input_modalities]
        predictions = predict_images(net, params, inputs)
        for modality, pred in zip(cfg.output_modalities, predictions):
            target = sample[modality]
            rows.append((sample.sample_id, modality,
                         psnr(pred, target, cfg.psnr_max),
                         ssim_standard(pred, target, dynamic_range=cfg.dynamic_range)))
    return rows


def mean_scores(rows):
    return float(np.mean([r[2] for r in rows])), float(np.mean([r[3] for r in rows]))


def write_csv(path, header, rows):
    with open(path, 'w', newline='') as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        writer.writerows(rows)


def _metric_row(*cells):
    return [format_metric(c) if isinstance(c, float) else c for c in cells]


def _evaluation_split(dataset, cfg):
    train_ids, test_ids = data.split_ids(dataset.manifest.sample_ids, cfg.train_fraction)
    if not test_ids:
        logger.warning("Test split is empty, evaluating on the %d training samples", len(train_ids))
        test_ids = train_ids
    return dataset.subset(train_ids), dataset.subset(test_ids)


def _config_of(cp):
    cfg = cp.config
    if cfg is None:
        t = cp.topology
        cfg = RunConfig(topology=t.kind, depth=t.depth, channels=t.channels)
    return cfg


def cmd_gen_data(args):
    h, w = parse_size(args.size)
    manifest = data.write_dataset(args.out, args.count, h, w, args.seed)
    print('wrote %d samples (%dx%d) to %s' % (len(manifest.sample_ids), h, w, args.out))
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    dataset = data.load_dataset(args.data)
    train_set, _ = _evaluation_split(dataset, cfg)
    topology = Topology.from_config(cfg)
    state, start_epoch = None, 0
    if args.resume:
        cp = load_checkpoint(args.resume)
        if cp.topology != topology:
            raise UsageError("checkpoint %s holds %r, config describes %r"
                             % (args.resume, cp.topology, topology))
        net, params = SynNetModel(topology), cp.params()
        state, start_epoch = cp.optim_state(cfg.lr, cfg.momentum), cp.epoch
        logger.info("Resuming from %s after epoch %d (iteration %d)",
                    args.resume, start_epoch, state.iteration if state else 0)
    else:
        net, params = build_model(topology, RngStream(init_seed(cfg.seed)), cfg.dtype)
        state = OptimState.from_config(cfg, params)

    result = train(net, params, train_set, TrainConfig.from_config(cfg), state, start_epoch)
    save_checkpoint(args.out, Checkpoint.from_training(
        topology, result.params, result.state, cfg.epochs, format_config(cfg)))
    if args.history:
        write_csv(args.history, defaults.HISTORY_COLUMNS,
                  [[r.iter, r.epoch] + [repr(float(v)) for v in r[2:]] for r in result.history])
        logger.info("Wrote %d history rows to %s", len(result.history), args.history)

    score_psnr, score_ssim = mean_scores(evaluate(net, result.params, train_set, cfg))
    print('train psnr_db=%s ssim=%s' % (format_metric(score_psnr), format_metric(score_ssim)))
    return 0


def cmd_predict(args):
    cp = load_checkpoint(args.ckpt)
    cfg = _config_of(cp)
    net = SynNetModel(cp.topology)
    sources, targets = str_to_list(args.input), str_to_list(args.output)
    if len(sources) != cp.topology.in_arms or len(targets) != cp.topology.out_arms:
        raise UsageError("%s checkpoint takes %d input and %d output files, got %d and %d"
                         % (cp.topology.kind, cp.topology.in_arms, cp.topology.out_arms,
                            len(sources), len(targets)))
    inputs = [data.load_pgm(path) for path in sources]
    predictions = predict_images(net, cp.params(), inputs)
    for path, pred in zip(targets, predictions):
        data.save_pgm(path, np.clip(pred.astype(np.float64), 0.0, 1.0))
        logger.info("Wrote %s", path)
    return 0


def cmd_eval(args):
    cp = load_checkpoint(args.ckpt)
    cfg = _config_of(cp)
    dataset = data.load_dataset(args.data)
    for name in cfg.input_modalities + cfg.output_modalities:
        if name not in dataset.manifest.modalities:
            raise DataError("checkpoint needs modality %r, missing from %s" % (name, args.data))
    _, test_set = _evaluation_split(dataset, cfg)
    net = SynNetModel(cp.topology)
    rows = evaluate(net, cp.params(), test_set, cfg)
    mean_psnr, mean_ssim = mean_scores(rows)
    write_csv(args.report, defaults.EVAL_COLUMNS,
              [_metric_row(*r) for r in rows] + [_metric_row('mean', 'all', mean_psnr, mean_ssim)])
    print('eval psnr_db=%s ssim=%s over %d rows' % (format_metric(mean_psnr), format_metric(mean_ssim), len(rows)))
    return 0


def cmd_gradcheck(args):
    report = gradcheck_suite(args.seed)
    print(report.format())
    return 0 if report.passed else 1


def cmd_compare_losses(args):
    base = load_config(args.config)
    dataset = data.load_dataset(args.data)
    train_set, test_set = _evaluation_split(dataset, base)
    rows = []
    for kind in defaults.LOSSES:
        scores = []
        for offset in range(args.seeds):
            cfg = dataclasses.replace(base, loss=kind, seed=base.seed + offset)
            net, params = build_model(Topology.from_config(cfg), RngStream(init_seed(cfg.seed)), cfg.dtype)
            result = train(net, params, train_set, TrainConfig.from_config(cfg),
                           OptimState.from_config(cfg, params))
            score = mean_scores(evaluate(net, result.params, test_set, cfg))
            scores.append(score)
            rows.append(_metric_row(kind, str(cfg.seed), *score))
            logger.info("%s seed %d: psnr %.4f dB, ssim %.4f", kind, cfg.seed, score[0], score[1])
        rows.append(_metric_row(kind, 'mean', *(float(v) for v in np.mean(scores, axis=0))))
    write_csv(args.report, defaults.COMPARE_COLUMNS, rows)
    print('compared %d losses over %d seeds, report in %s' % (len(defaults.LOSSES), args.seeds, args.report))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='synnet', description='Cross-modality image synthesis networks.')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    parser.add_argument('--log-level', default='INFO', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen-data', help='generate a synthetic phantom dataset')
    p.add_argument('--out', required=True, metavar='DIR')
    p.add_argument('--count', required=True, type=int, metavar='N')
    p.add_argument('--size', default='64x64', metavar='HxW')
    p.add_argument('--seed', type=int, default=defaults.SEED)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', help='train a model on a dataset directory')
    p.add_argument('--config', required=True, metavar='FILE')
    p.add_argument('--data', required=True, metavar='DIR')
    p.add_argument('--out', required=True, metavar='CKPT')
    p.add_argument('--resume', metavar='CKPT')
    p.add_argument('--history', metavar='CSV')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('predict', help='synthesize target images from source images')
    p.add_argument('--ckpt', required=True, metavar='CKPT')
    p.add_argument('--input', required=True, metavar='FILE[,FILE]')
    p.add_argument('--output', required=True, metavar='FILE[,FILE]')
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('eval', help='PSNR and SSIM of a checkpoint on the test split')
    p.add_argument('--ckpt', required=True, metavar='CKPT')
    p.add_argument('--data', required=True, metavar='DIR')
    p.add_argument('--report', required=True, metavar='CSV')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('gradcheck', help='run the finite-difference gradient checks')
    p.add_argument('--seed', type=int, default=defaults.SEED)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('compare-losses', help='train with every loss over several seeds')
    p.add_argument('--config', required=True, metavar='FILE')
    p.add_argument('--data', required=True, metavar='DIR')
    p.add_argument('--seeds', type=int, default=5, metavar='K')
    p.add_argument('--report', required=True, metavar='CSV')
    p.set_defaults(func=cmd_compare_losses)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except SynNetError as e:
        print('synnet: error[%s]: %s' % (e.kind, e), file=sys.stderr)
    except OSError as e:
        print('synnet: error[io]: %s' % e, file=sys.stderr)
    return 2
