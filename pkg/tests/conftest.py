import pathlib

import pytest
import torch

from segguide.core import (
    BaselineKind,
    DataConfig,
    FrameworkConfig,
    NetworkConfig,
    ObjectiveConfig,
    RunConfig,
    Variant,
)
from segguide.datapipe import DatasetManifest, generate_shape_scenes

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> tuple[DatasetManifest, pathlib.Path]:
    """8 train / 4 test synthetic scenes at 32x32 with 4 classes."""
    root = tmp_path_factory.mktemp("tinyds")
    manifest = generate_shape_scenes(
        root, n_train=8, n_test=4, resolution=32, class_count=4, seed=11
    )
    return manifest, root


def tiny_config(
    variant: Variant = Variant.BINARY,
    baseline: BaselineKind = BaselineKind.UNPAIRED,
    dataset_dir: str = "",
    seed: int = 0,
    epochs: int = 1,
    batch_size: int = 4,
    resolution: int = 32,
    class_count: int = 4,
    **run_kw,
) -> FrameworkConfig:
    return FrameworkConfig(
        run=RunConfig(resolution=resolution, epochs=epochs, seed=seed,
                      batch_size=batch_size, **run_kw),
        objective=ObjectiveConfig.for_variant(variant, baseline=baseline),
        data=DataConfig(dataset_dir=dataset_dir),
        networks=NetworkConfig(
            gen_base_width=8, gen_depth=2, disc_base_width=8, disc_layers=2,
            seg_class_count=class_count,
            seg_foreground_ids=",".join(str(i) for i in range(1, class_count)),
        ),
    )
