"""Context-aware padding: learned border extrapolation and padding benchmarks.

The package trains small displacement networks that extend an image past
its borders by warping known content outward, provides the classic padding
baselines (zero, circular, reflect, replicate, bilinear extrapolation,
distribution), and benchmarks them with masked PSNR/MSE, border mIoU and
error-distance statistics.  See the ``capad`` command for the CLI.
"""

__version__ = "0.1.0"

from .imagery import (AugmentConfig, Block, IGNORE_INDEX, SIDES, augment, extract_block,
                      load_image, load_tensor, make_border_mask, save_image, save_tensor,
                      sliding_crops)
from .padding import (METHOD_TAGS, PaddingMethod, pad_bilinear_extrapolation,
                      pad_distribution, pad_index_mapped, partial_conv2d)
from .warp import warp_backward, warp_forward
from .net import (DisplacementNet, NetConfig, load_checkpoint, net_backward, net_forward,
                  net_init, save_checkpoint)
from .train import (AdamState, PadModel, TrainConfig, adam_step, ca_pad, load_bundle,
                    make_training_pair, reconstruction_loss, save_bundle, train_direction)
from .bench import (DEEPGLOBE_CLASSES, MetricsRecord, border_miou, error_distance_histogram,
                    eval_padding, load_label_map, masked_psnr_mse, miou, save_label_map,
                    summed_activation_map)

__all__ = [
    "AugmentConfig", "Block", "IGNORE_INDEX", "SIDES", "augment", "extract_block",
    "load_image", "load_tensor", "make_border_mask", "save_image", "save_tensor",
    "sliding_crops",
    "METHOD_TAGS", "PaddingMethod", "pad_bilinear_extrapolation", "pad_distribution",
    "pad_index_mapped", "partial_conv2d",
    "warp_backward", "warp_forward",
    "DisplacementNet", "NetConfig", "load_checkpoint", "net_backward", "net_forward",
    "net_init", "save_checkpoint",
    "AdamState", "PadModel", "TrainConfig", "adam_step", "ca_pad", "load_bundle",
    "make_training_pair", "reconstruction_loss", "save_bundle", "train_direction",
    "DEEPGLOBE_CLASSES", "MetricsRecord", "border_miou", "error_distance_histogram",
    "eval_padding", "load_label_map", "masked_psnr_mse", "miou", "save_label_map",
    "summed_activation_map",
    "__version__",
]
