"""Vector-quantized 3D OCT-to-OCTA volume translation toolkit."""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    Modality,
    PairEntry,
    PairManifest,
    ProjectionMap,
    Volume,
    projection_map,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)
from .phantom import PhantomConfig, generate_phantom_pair, generate_phantom_sample  # noqa: F401
from .vq import Codebook, QuantizeResult, straight_through, vq_quantize, vqvae_loss  # noqa: F401
from .nets import NetConfig, VolumeVqvae  # noqa: F401
from .alignment import (  # noqa: F401
    PatchEmbeddingGrid,
    ProjectionHead,
    contrastive_distribution,
    csa_loss,
    patch_cosine_matrix,
    patchify_features,
    vsa_loss,
)
from .metrics import codebook_utilization, mae, psnr, ssim  # noqa: F401
from .trainer import (  # noqa: F401
    TrainConfig,
    TranslationModel,
    stage2_loss,
    train_stage1,
    train_stage2,
    translate,
)
