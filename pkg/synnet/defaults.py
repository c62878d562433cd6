import numpy as np


# Topology.
TOPOLOGY = 'siso'
TOPOLOGIES = ('siso', 'miso', 'mimo')
DEPTH = 3
CHANNELS = (32, 64, 64)
HEAD_WIDTH = 64
SKIP_CONNECTIONS = True
MISO_INDEX_ARM = 0
MIMO_SKIP = 'both'
MIMO_SKIP_MODES = ('both', 'matched')

# Modalities, keyed by the name used in configs and on disk.
MODALITIES = ('t1', 't2', 't1c', 'flair')
INPUT_MODALITIES = {
    'siso': ('t1',),
    'miso': ('t1', 't1c'),
    'mimo': ('t1', 't1c'),
}
OUTPUT_MODALITIES = {
    'siso': ('t2',),
    'miso': ('t2',),
    'mimo': ('t2', 'flair'),
}

# Cost function. Relative weights of the joint loss.
LOSS = 'joint'
LOSSES = ('l2', 'weighted_l2', 'joint')
LAMBDA1 = 10.0
LAMBDA2 = 5.0
LAMBDA3 = 0.5
LAMBDA4 = 0.0001
SSIM_MODE = 'local'
SSIM_MODES = ('local', 'global')
SSIM_WINDOW = 7
DYNAMIC_RANGE = 1.0
# Added to the loss-side variances under the square root.
SSIM_SIGMA_EPS = 1e-12
EDGE_BETA = 4.0
TV_EPS = 1e-8

# Layers.
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Optimizer and training loop.
LR = 0.01
MOMENTUM = 0.9
BATCH_SIZE = 32
EPOCHS = 10
SEED = 42
SHUFFLE = True
AUGMENT = True
DTYPE = 'single'
DTYPES = {
    'single': np.float32,
    'double': np.float64,
}
TRAIN_FRACTION = 0.8

# Evaluation metrics.
PSNR_MAX = 1.0
METRIC_SSIM_WINDOW = 11
METRIC_SSIM_SIGMA = 1.5

# Data.
MIN_IMAGE_SIZE = 16
MANIFEST_NAME = 'manifest.txt'
PGM_SUFFIX = '.pgm'
PGM_MAXVAL = 255
AUGMENT_SCALES = (0.9, 1.0, 1.1)
AUGMENT_FLIP_PROB = 0.5

# Checkpoint binary format.
CHECKPOINT_MAGIC = b'SYNNETCK'
CHECKPOINT_VERSION = 1

# Gradient checks.
FD_STEP = 1e-5
REL_ERROR_FLOOR = 1e-12
TOL_LAYER = 1e-6
TOL_RELU = 1e-7
TOL_UNPOOL = 1e-7
TOL_L2 = 1e-7
TOL_SSIM = 1e-5
TOL_TV = 1e-4
TOL_MODEL = 1e-5
TOL_ORACLE = 1e-12

# CSV schemas.
HISTORY_COLUMNS = ('iter', 'epoch', 'l2', 'ssim', 'tv', 'wd', 'total')
EVAL_COLUMNS = ('sample_id', 'head', 'psnr_db', 'ssim')
COMPARE_COLUMNS = ('loss', 'seed', 'psnr_db', 'ssim')
