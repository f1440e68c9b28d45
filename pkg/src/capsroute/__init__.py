"""capsroute: capsule-network training with quadratic-programming routing.

The library implements a small fixed capsule network (conv stem, primary
capsules, projection, output capsules, optional reconstruction decoder)
together with three ways of producing the coefficients that couple primary
capsules to output capsules:

* ``dynamic``  - softmaxed agreement routing recomputed per example,
* ``l2`` / ``l1`` - a persistent, possibly negative coefficient matrix
  trained by gradient ascent on a label-signed quadratic objective with an
  l2 or l1 penalty, alternating with SGD on the regular weights.

Everything is plain numpy; backward passes are hand-written and validated
by the finite-difference suite in :mod:`capsroute.gradcheck`.
"""

from .data import (
    Batch,
    DatasetSplit,
    LabeledImage,
    batches,
    load_dataset,
    make_multimnist,
    make_synthetic_digits,
    read_cifar10,
    read_idx,
    write_idx,
)
from .errors import ConfigError, DataError, DimensionError, DivergenceError, FormatError
from .losses import MarginConfig, margin_loss, margin_loss_grad, recon_loss, targets_from_labels
from .model import (
    CapsNetParams,
    ForwardTrace,
    ModelArch,
    backward,
    digit_caps,
    forward,
    init_params,
    preset_arch,
    primary_capsules,
    project,
    reconstruct,
    squash,
    squash_backward,
)
from .routing import (
    RoutingConfig,
    definiteness_probe,
    dynamic_route,
    init_coefficients,
    label_signs,
    routing_objective,
    update_l1,
    update_l2,
)
from .tensorops import ConvSpec, conv2d_forward, grad_check, matmul
from .trainer import (
    FULL_SCALE_ERROR_RATES,
    MetricsRow,
    TrainConfig,
    evaluate,
    lr_schedule,
    train,
    train_step,
)

__version__ = "0.1.0"
