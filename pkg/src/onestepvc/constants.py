"""Central constants for onestepvc."""

CHECKPOINT_FORMAT_VERSION = 1

# Full-scale settings; desk-scale runs override them through the config.
FULL_SCALE_TIMESTEPS = 1000
FULL_SCALE_T_PRIME = 950
FULL_SCALE_DENOISER_LAYERS = 12
FULL_SCALE_HIDDEN_CHANNELS = 512
FULL_SCALE_CONTENT_LAYERS = 3

LAMBDA_FM = 2.0
LAMBDA_DIST = 45.0
LAMBDA_INV_DIST = 22.5

TRAINING_MODES = ("teacher", "fastvoicegrad", "adcd", "direct")
DISCRIMINATOR_DOMAINS = ("mel", "waveform")

RUN_CONFIG_NAME = "config.yaml"
METRICS_LOG_NAME = "metrics.jsonl"
TIMING_LOG_NAME = "timing.jsonl"
CHECKPOINT_DIR_NAME = "checkpoints"
EVAL_DIR_NAME = "eval"
