"""Shared expected values for the schedule tests and the acceptance suite."""

# Quantization settings per intervention type: Q+TI marks sub-layers whose
# quantization error is bypassed by the teacher signal.
SETTINGS_TABLE = {
    "ti_m": {
        "Step1-Phase1": {"GEN": "Q+TI", "PROP": "Q", "FFN": "Q"},
        "Step1-Phase2": {"GEN": "Q+TI", "PROP": "Q", "FFN": "Q"},
        "Step2": {"GEN": "Q", "PROP": "Q", "FFN": "Q"},
    },
    "ti_o": {
        "Step1-Phase1": {"GEN": "Q+TI", "PROP": "Q+TI", "FFN": "Q"},
        "Step1-Phase2": {"GEN": "Q+TI", "PROP": "Q+TI", "FFN": "Q"},
        "Step2": {"GEN": "Q", "PROP": "Q", "FFN": "Q"},
    },
    "ti_g": {
        "Step1-Phase1": {"GEN": "Q+TI", "PROP": "Q+TI", "FFN": "Q"},
        "Step1-Phase2": {"GEN": "Q+TI", "PROP": "Q", "FFN": "Q"},
        "Step2": {"GEN": "Q", "PROP": "Q", "FFN": "Q"},
    },
}
