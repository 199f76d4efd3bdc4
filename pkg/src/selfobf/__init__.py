"""Self-obfuscating backdoors for image super-resolution.

Poisons LR:HR training pairs with a class-keyed trigger on the input and an
obfuscated target, trains a small numpy super-resolution network on them and
measures how far triggered outputs move toward the obfuscated reference.
"""

from .dataset import (
    DatasetManifest,
    PairedSample,
    PoisonConfig,
    SceneSpec,
    generate_corpus,
    poison_count,
    poison_dataset,
    render_scene,
    split_view,
)
from .exceptions import (
    ConfigError,
    DegenerateTriggerError,
    DimensionError,
    ImageIOError,
    SelfObfError,
    StageError,
    TrainingDivergedError,
)
from .harness import ExperimentConfig, baseline_random_noise, run_experiment
from .imaging import downscale, gaussian_blur, load_image, save_image, upsample
from .metrics import MetricReport, divergence, evaluate, psnr
from .obfuscation import ObfuscationSpec, Obfuscator, obfuscate
from .srnet import (
    SRModel,
    SuperResolutionNet,
    TrainConfig,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .trigger import BadNetsTrigger, TriggerPattern, TriggerRegistry, apply_trigger, generate_trigger

__version__ = "0.1.0"
