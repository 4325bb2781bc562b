# CAN base-format frames
MAX_BASE_CAN_ID = 0x7FF
MAX_DLC = 8
CAN_ID_BYTES = 2
BYTES_PER_MESSAGE = CAN_ID_BYTES + MAX_DLC

FLAG_NORMAL = "R"
FLAG_ATTACK = "T"

# Worst-case bit count of an 8-byte CAN 2.0A frame, including bit stuffing
# and interframe space.
MAX_BASE_FRAME_BITS = 135

# Attack injection IDs
DOS_CAN_ID = 0x000
RPM_CAN_ID = 0x316
GEAR_CAN_ID = 0x43F

# Fixed payloads for spoofed frames; the last byte carries a small counter
RPM_SPOOF_TEMPLATE = bytes([0x45, 0x29, 0x24, 0xFF, 0x29, 0x24, 0x00, 0xFF])
GEAR_SPOOF_TEMPLATE = bytes([0x01, 0x45, 0x60, 0xFF, 0x6B, 0x00, 0x00, 0x00])
SPOOF_COUNTER_SPAN = 4

# (can_id, period in seconds, dlc) of the periodic traffic in synthetic logs
DEFAULT_NORMAL_IDS = (
    (0x018, 0.010, 8),
    (0x034, 0.010, 8),
    (0x0A0, 0.100, 8),
    (0x0A1, 0.100, 8),
    (0x153, 0.010, 8),
    (0x164, 0.010, 8),
    (0x18F, 0.010, 8),
    (0x1F1, 0.020, 8),
    (0x220, 0.010, 8),
    (0x260, 0.010, 8),
    (0x2A0, 0.010, 8),
    (0x2C0, 0.010, 8),
    (RPM_CAN_ID, 0.010, 8),
    (0x329, 0.010, 8),
    (0x350, 0.020, 8),
    (0x370, 0.010, 8),
    (GEAR_CAN_ID, 0.010, 8),
    (0x440, 0.010, 8),
    (0x4B1, 0.020, 8),
    (0x4F0, 0.020, 8),
    (0x545, 0.010, 8),
    (0x5A0, 0.100, 5),
    (0x5F0, 0.200, 2),
    (0x690, 0.100, 8),
)
DEFAULT_JITTER_PROBABILITY = 0.05
# Payload templates belong to the vehicle, not to one capture
VEHICLE_TEMPLATE_SEED = 0x316
DEFAULT_ATTACK_BURSTS = 10

# Window
DEFAULT_WINDOW_DEPTH = 4
BYTE_ZERO_POINT = 128

# Dataset split
DEFAULT_SPLIT = (0.80, 0.15, 0.05)
SPLIT_TOLERANCE = 1e-9

# Network
DEFAULT_LAYER_UNITS = (40, 256, 128, 64, 32, 1)
DEFAULT_DROPOUT_RATE = 0.2
DEFAULT_BN_EPSILON = 1e-3
DEFAULT_BN_MOMENTUM = 0.99

# Training
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 64
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
PROBABILITY_CLAMP = 1e-7
DEFAULT_EARLY_STOP_DROP = 0.02
DEFAULT_EARLY_STOP_PATIENCE = 5

# Gradient verification
FINITE_DIFFERENCE_STEP = 1e-4
RELATIVE_ERROR_FLOOR = 1e-4

# INT8 quantization
INT8_MIN = -128
INT8_MAX = 127
INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1
INPUT_FRACTION_BITS = 0
ZERO_TENSOR_FRACTION_BITS = 7
DEFAULT_CALIBRATION_SIZE = 1024
MAX_SATURATION_RATE = 0.001

# Detection
DEFAULT_THRESHOLD = 0.5
DEFAULT_QUEUE_DEPTH = 64

# Container files
MODEL_FILE_MAGIC = b"CANIDS"
MODEL_FILE_VERSION = 1
MODEL_KIND_FLOAT = b"float"
MODEL_KIND_QUANT = b"int8"

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4
