import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# NIfTI-1
NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC_SINGLE = b"n+1\x00"
NIFTI_INTENT_LABEL = 1002
NIFTI_DATATYPES = {
    2: "uint8",
    4: "int16",
    16: "float32",
}
NIFTI_BITPIX = {2: 8, 4: 16, 16: 32}
NIFTI_XYZT_MM = 2

# Intensity conventions
HU_SCALE = 1000.0
AIR_HU = -1000.0
AIR_NORMALIZED = -1.0

# Preprocessing
CROP_SIZE_2D = (256, 256)
TILE_STRIDE_2D = (192, 192)
PATCH_SIZE_3D = (32, 128, 128)
PATCH_STRIDE_3D = (24, 96, 96)
PAD_MULTIPLE = 8
ISO_SPACING_MM = (1.0, 1.0, 1.0)
RESAMPLE_TOLERANCE = 1e-6

# Diffusion
DIFFUSION_T = 1000
COSINE_S = 0.008
BETA_MAX = 0.999
DDIM_STEPS_2D = 20
DDIM_STEPS_3D = 25
DDIM_ETA = 1.0
GUIDANCE_W = 0.0

# Augmentation
DEFORM_CONTROL_GRID = (4, 4, 4)
DEFORM_SIGMA_MM = 4.0
JITTER_BRIGHTNESS = 0.2
JITTER_CONTRAST = 0.2

# Registration
COLLINEARITY_RATIO = 1e-6
LANDMARK_JITTER_MM = 0.0

# Segmentation
BONE_THRESHOLD = 0.3
MIN_COMPONENT_VOXELS = 100
BOUNDARY_FRACTION = 0.5
POSTERIOR_AXIS = 1
CRANIOCAUDAL_AXIS = 2

# Evaluation
MASK_RADIUS_PX = 10
PSNR_PEAK = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4
VIF_DATA_RANGE = 2.0

# Ablation grid
ABLATION_STEPS = [10, 20, 50]
ABLATION_ETAS = [0.0, 1.0]
ABLATION_WS = [0.0, 1.0, 2.0]
ABLATION_DEFAULT_CELL = (DDIM_STEPS_2D, DDIM_ETA, GUIDANCE_W)

# Output file names
PHANTOM_FILES = {
    "mr": "mr.nii.gz",
    "ct": "ct.nii.gz",
    "ct_labels": "ct_labels.nii.gz",
    "ct_subregions": "ct_subregions.nii.gz",
    "mr_labels": "mr_labels.nii.gz",
    "mr_subregions": "mr_subregions.nii.gz",
    "mr_landmarks": "mr_landmarks.txt",
}
REGISTER_FILES = {
    "ct": "ct_registered.nii.gz",
    "ct_labels": "ct_labels_registered.nii.gz",
    "ct_subregions": "ct_subregions_registered.nii.gz",
    "ct_landmarks": "ct_landmarks.txt",
    "report": "register_report.json",
}
SEGMENT_FILES = {
    "labels": "seg_labels.nii.gz",
    "subregions": "seg_subregions.nii.gz",
    "landmarks": "seg_landmarks.txt",
}
TRANSLATE_FILE = "synth_ct.nii.gz"
AUGMENT_DIR = "augmented"
ABLATION_CELL_DIR = "ablation/steps{steps}_eta{eta:g}_w{w:g}"
EVALUATE_FILES = {
    "images": "image_metrics.csv",
    "dice": "dice.csv",
    "ttests": "ttests.csv",
    "summary": "metrics.json",
}
ABLATE_FILES = {
    "table": "ablation.csv",
    "summary": "ablation.json",
}

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_VALIDATION_ERROR = 2

CLI_COMMANDS = [
    ("phantom", "Generate a paired MR/CT spine phantom with labels and landmarks"),
    ("register", "Rigidly register CT onto MR using vertebra landmarks"),
    ("segment", "Segment vertebrae and subregions in a CT volume"),
    ("translate", "Translate MR to CT with the diffusion sampler"),
    ("evaluate", "Compute image quality, Dice and paired t-tests"),
    ("ablate", "Sweep DDIM inference parameters (steps, eta, w)"),
]

# Messages
CONFIG_MISSING_PATH = "Config key '{key}' is required for '{command}'"
CONFIG_PATH_NOT_FOUND = "Input '{key}' does not exist: {path}"
CONFIG_BAD_OVERRIDE = "Override '{item}' is not of the form key=value"
CONFIG_FILE_NOT_FOUND = "Config file not found: {path}"
TWO_POINT_MISSING_SPINOUS = (
    "Two-point registration needs spinous landmarks for every matched vertebra; "
    "missing for ids {ids}"
)
