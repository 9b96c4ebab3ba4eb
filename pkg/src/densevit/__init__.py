"""Dense local-to-global contrastive pretraining of Vision Transformers, in numpy."""
from .autodiff import Tensor, backward, grad_check, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .contrastive import ContrastiveConfig, dense_loss, info_nce, vanilla_loss
from .data import Dataset, SyntheticShapesSpec, generate_shapes, read_manifest
from .finetune import DepthHeadConfig, FinetuneSchedule, SegHeadConfig, finetune
from .pretrain import PretrainSetup, TrainConfig, pretrain
from .vit import ViTConfig, preset

__version__ = "0.1.0"
