"""mvad: multi-view adaptive-selection attention and multi-view anomaly detection."""


def __getattr__(name):
    """Lazy imports so ``import mvad`` stays cheap for the command line."""
    _tensor_exports = {"Tape", "Tensor", "no_grad", "precision"}
    _mvas_exports = {"dense_cross_attention_oracle", "mvas_block", "mvas_forward"}
    _complexity_exports = {"flop_model", "optimal_window"}
    _conf_exports = {"RunConfig", "build_config", "preset"}
    _model_exports = {"MvadModel", "load_checkpoint", "save_checkpoint"}
    _pipeline_exports = {"evaluate", "forward", "train"}
    _synthdata_exports = {"DatasetSpec", "generate", "load"}
    _metrics_exports = {"auroc", "average_precision", "f1_max", "pro"}

    modules = [
        (_tensor_exports, "mvad.tensor"),
        (_mvas_exports, "mvad.mvas"),
        (_complexity_exports, "mvad.complexity"),
        (_conf_exports, "mvad.conf"),
        (_model_exports, "mvad.model"),
        (_pipeline_exports, "mvad.pipeline"),
        (_synthdata_exports, "mvad.synthdata"),
        (_metrics_exports, "mvad.metrics"),
    ]
    for exports, module_path in modules:
        if name in exports:
            import importlib

            return getattr(importlib.import_module(module_path), name)

    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "precision",
    "mvas_forward",
    "mvas_block",
    "dense_cross_attention_oracle",
    "flop_model",
    "optimal_window",
    "RunConfig",
    "build_config",
    "preset",
    "MvadModel",
    "save_checkpoint",
    "load_checkpoint",
    "train",
    "evaluate",
    "forward",
    "DatasetSpec",
    "generate",
    "load",
    "auroc",
    "average_precision",
    "f1_max",
    "pro",
]

__version__ = "0.1.0"
