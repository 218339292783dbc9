import math
import os

from dotenv import load_dotenv

load_dotenv()

# =============================================================================
# Guardrails and Environment
# =============================================================================

MAX_RESAMPLE_RETRIES = 100
DEFAULT_THREADS = int(os.getenv("FEDSIM_THREADS", "0")) or (os.cpu_count() or 1)
QUIET = os.getenv("FEDSIM_QUIET", "0") == "1"
PROJECT_NAME = "fedsim-ct"
PROJECT_VERSION = "1.0.0"

# =============================================================================
# Numerical Core
# =============================================================================

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# =============================================================================
# Generative Model
# =============================================================================

LATENT_DIM = 32
SSM_MODES = 14
POSE_DIM = 7                      # axis-angle (3), translation (3), log-scale (1)
MODE_CLAMP = 1.5                  # |b_j| <= 1.5 sqrt(lambda_j)
SHAPE_HIDDEN = (256, 128)
MATERIAL_CHANNELS = (256, 128)
MATERIAL_EXTENT = 16              # 1 -> x4 -> x2 -> x2
ENHANCER_CHANNELS = 32
MU_MAX = 0.05                     # mm^-1, water scale
ROTATION_RANGE = math.pi / 8
TRANSLATION_FRACTION = 1.0 / 8    # of the volume extent in mm
LOG_SCALE_RANGE = 0.1
LATENT_PRIOR_RIDGE = 1e-6

# =============================================================================
# CT Renderer
# =============================================================================

RENDER_EXTENT = 32
RENDER_VIEWS = 32
PARALLEL_TEST_EXTENT = 128
PARALLEL_TEST_VIEWS = 180
SOURCE_TO_ISO_FACTOR = 2.0        # x volume width
SOURCE_TO_DETECTOR_FACTOR = 4.0   # x volume width
RAMP_WINDOWS = ("ramlak", "hann")

# =============================================================================
# Shape Model / Voxelization
# =============================================================================

REGION_COUNT = 7
GRID_THETA = 8
GRID_PHI = 16
SOFT_TEMPERATURE = 1.0            # voxels
DIRECTION_TABLE = (24, 48)        # theta x phi lookup of the radial surface function
FD_MODE_STEP = 0.01               # x sqrt(lambda_j)
FD_TRANSLATION_STEP = 0.5         # voxels
FD_ROTATION_STEP = 0.01           # radians
FD_LOG_SCALE_STEP = 0.01

# =============================================================================
# Training Schedule
# =============================================================================

# (latents + shape/material generators, enhancer)
LR_PRETRAIN = 1e-4
LR_ENHANCER_PRETRAIN = 1e-4
LR_LABELED = (1e-4, 1e-5)
LR_UNLABELED = (1e-3, 1e-4)
EPOCHS_CONSTANT = 30
EPOCHS_DECAY = 30
TRAIN_PHASES = ("pretrain_params", "pretrain_enhancer", "semi_supervised")

# =============================================================================
# Federated Harness
# =============================================================================

WIRE_MAGIC = b"FSFL"
DEFAULT_LISTEN = "127.0.0.1:7431"
ROUND_TIMEOUT_S = 60.0

# =============================================================================
# Evaluation
# =============================================================================

EVAL_ARMS = ("LowerBound", "OursFixMat", "OursPre", "OursFull", "UpperBound")
SEG_CHANNELS = 8

# =============================================================================
# Phantom Families
# =============================================================================

# Semi-axes are fractions of the volume half-width, outermost region first.
# Attenuation values are effective linear coefficients in mm^-1.
DEFAULT_FAMILIES = {
    "siteA": {
        "name": "siteA",
        "n_regions": 7,
        "semi_axes": [
            [0.70, 0.62, 0.66], [0.60, 0.52, 0.56], [0.50, 0.44, 0.47],
            [0.42, 0.36, 0.39], [0.33, 0.28, 0.31], [0.25, 0.21, 0.23],
            [0.16, 0.13, 0.15],
        ],
        "axis_sigma": 0.04,
        "center_sigma": 0.03,
        "bump_sigma": 0.05,
        "mu_mean": [0.018, 0.021, 0.024, 0.020, 0.026, 0.022, 0.028],
        "mu_sigma": 0.001,
        "mu_offset": 0.0,
        "background_mu": 0.004,
        "noise_photons": 0.0,
    },
    "siteB": {
        "name": "siteB",
        "n_regions": 7,
        "semi_axes": [
            [0.62, 0.66, 0.60], [0.53, 0.57, 0.51], [0.45, 0.48, 0.43],
            [0.37, 0.40, 0.35], [0.29, 0.32, 0.28], [0.22, 0.24, 0.21],
            [0.14, 0.15, 0.13],
        ],
        "axis_sigma": 0.06,
        "center_sigma": 0.04,
        "bump_sigma": 0.08,
        "mu_mean": [0.018, 0.021, 0.024, 0.020, 0.026, 0.022, 0.028],
        "mu_sigma": 0.0015,
        "mu_offset": 0.003,
        "background_mu": 0.005,
        "noise_photons": 0.0,
    },
    "siteC": {
        "name": "siteC",
        "n_regions": 7,
        "semi_axes": [
            [0.66, 0.60, 0.70], [0.56, 0.51, 0.60], [0.47, 0.43, 0.51],
            [0.39, 0.35, 0.42], [0.31, 0.28, 0.33], [0.23, 0.21, 0.25],
            [0.15, 0.13, 0.16],
        ],
        "axis_sigma": 0.05,
        "center_sigma": 0.05,
        "bump_sigma": 0.06,
        "mu_mean": [0.018, 0.021, 0.024, 0.020, 0.026, 0.022, 0.028],
        "mu_sigma": 0.001,
        "mu_offset": -0.002,
        "background_mu": 0.003,
        "noise_photons": 0.0,
    },
}

# Fixed attenuation atlas (per region, background first) for the fixed-material arm.
FIXED_ATLAS = [0.004, 0.018, 0.021, 0.024, 0.020, 0.026, 0.022, 0.028]
