### Target distributions
# vocabulary excludes the start symbol "#", which is always encoded as index |V|
DEFAULT_VOCAB_SIZE = 5
DEFAULT_LENGTH = 5
DEFAULT_TARGET_SEED = 0

# transition patterns of the three studied targets
TARGET_PATTERNS = {
    "base": [0.8, 0.2],
    "lower": [0.9, 0.1],
    "higher": [0.6, 0.3, 0.1],
}

# tolerance for probability vectors summing to 1
PROB_SUM_TOL = 1e-12

### Exact evaluation
# enumeration fails loudly above this many sequences
ENUMERATION_CAP = 10_000_000
# sequences per forward pass during enumeration
EVAL_CHUNK_SIZE = 4096
# tolerance of the NextTokenModel row contract
MODEL_ROW_TOL = 1e-9

### Tensor engine
LAYERNORM_EPS = 1e-5
FINITE_DIFF_STEP = 1e-6
# relu gradient checks keep inputs this far from the kink
RELU_KINK_MARGIN = 1e-3

### Model defaults
DEFAULT_D = 64
DEFAULT_LAYERS = 5
DEFAULT_HEADS = 4
# d_h = FFN_MULT * d
FFN_MULT = 4
DEFAULT_DROPOUT = 0.1
DEFAULT_MODEL_SEED = 0

MODEL_FAMILIES = ["transformer", "gru", "lstm"]
MODEL_VARIANTS = ["full", "attention_only", "attention_main", "ffn_main"]

### Training defaults
DEFAULT_SAMPLE_COUNT = 65_536
DEFAULT_SAMPLE_SEED = 1
DEFAULT_BATCH_SIZE = 512
DEFAULT_EPOCHS = 100
DEFAULT_SHUFFLE_SEED = 2

# reduced preset for quick checks
SMOKE_D = 16
SMOKE_EPOCHS = 20

### Optimizer presets, do not change
OPTIMIZER_KINDS = ["sgd_momentum", "rmsprop", "adam", "adamw"]
OPTIMIZER_PRESETS = {
    "adam": {"kind": "adam", "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0},
    "adam_2nd": {"kind": "adam", "lr": 0.0005, "beta1": 0.01, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0},
    "sgd_momentum": {"kind": "sgd_momentum", "lr": 0.001, "momentum": 0.9, "weight_decay": 0.0},
    "rmsprop": {"kind": "rmsprop", "lr": 0.0001, "alpha": 0.99, "eps": 1e-8, "weight_decay": 0.01},
    "adamw": {"kind": "adamw", "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01},
    "adamw_appendix": {"kind": "adamw", "lr": 0.001, "beta1": 0.01, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01},
}
DEFAULT_OPTIMIZER_PRESET = "adam"

### Probes
ACTIVATION_BINS = 20
ROUTER_BINS = 30
SPIKE_RISE_THRESHOLD = 0.3
SPIKE_LOOKBACK = 3
JUMP_THRESHOLD = 0.01
PAIRING_WINDOW = 3
SMOOTH_WINDOW = 3
TAIL_EPOCHS = 15
DEFAULT_CENSUS_EVERY = 1

### Run directory layout
CONFIG_FILE = "config.toml"
TARGET_FILE = "target.txt"
DATASET_FILE = "dataset.txt"
METRICS_FILE = "metrics.csv"
HISTOGRAMS_FILE = "histograms.json"
SPIKES_FILE = "spikes.json"
SUMMARY_FILE = "summary.json"
PLOTS_DIR = "plots"
CHECKPOINT_DIR = "checkpoints"

METRICS_COLUMNS = [
    "epoch",
    "mean_train_loss",
    "model_entropy",
    "kl_vs_empirical_target",
    "cross_entropy_full",
    "sparse_part_entropy",
    "nonsparse_part_entropy",
    "dead_proportion",
    "mean_active_fraction",
    "spike_flag",
]

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_ABORTED = 3
