# Prediction Configuration
DEFAULT_NUM_SAMPLES = 32
DEFAULT_BATCH_SIZE = 32
PROB_TOLERANCE = 1e-6

# Training Configuration
DEFAULT_EPOCHS = 50
DEFAULT_LEARNING_RATE = 0.05

# Ensemble Configuration
MODEL_FILE_TEMPLATE = "model_{}.uwm"
MANIFEST_NAME = "ensemble.json"
MANIFEST_VERSION = 1
LOCK_NAME = ".uwlock"
WORKER_START_METHOD = "spawn"
MAX_TASK_ATTEMPTS = 2
DEFAULT_MODELS_PER_PROCESS = 1

# Environment
LOG_ENV_VAR = "UQWIZ_LOG"
DEFAULT_LOG_LEVEL = "warn"
DEVICE_ENV_VAR = "UQWIZ_DEVICE"
