"""FedWSIDD: one-shot federated WSI classification via distilled synthetic slides."""

from ._core import (
    Error,
    SmallConvExtractor,
    angular_distance_deg,
    communication_cost,
    config_keys,
    decode_archive,
    encode_archive,
    estimate_stain_basis,
    fm_gradient,
    fm_loss,
    generate_toy_federation,
    mean_std,
    normalize,
    od_to_rgb,
    paired_t_test,
    reference_basis,
    rgb_to_od,
    run_cli,
    weighted_global_average,
)

__all__ = [
    "Error",
    "SmallConvExtractor",
    "angular_distance_deg",
    "communication_cost",
    "config_keys",
    "decode_archive",
    "encode_archive",
    "estimate_stain_basis",
    "fm_gradient",
    "fm_loss",
    "generate_toy_federation",
    "mean_std",
    "normalize",
    "od_to_rgb",
    "paired_t_test",
    "reference_basis",
    "rgb_to_od",
    "run_cli",
    "weighted_global_average",
]
