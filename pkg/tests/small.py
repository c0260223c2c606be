"""A configuration small enough for end-to-end runs in a few seconds."""

SMALL = {
    "data.num_ids": 4,
    "data.cams": 2,
    "data.samples_per_id_per_cam": 2,
    "stage1.epochs": 2,
    "stage1.warmup_epochs": 1,
    "stage1.batch_size": 4,
    "stage2.epochs": 2,
    "stage2.P": 2,
    "stage2.K": 2,
    "stage2.warmup_epochs": 1,
    "stage2.decay_epochs": (2,),
    "augment.ratio": 0.5,
}


def small_config_text(**extra) -> str:
    vals = {**SMALL, **extra}
    return "".join(f"{k} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}\n" for k, v in vals.items())
