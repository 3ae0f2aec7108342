import numpy as np
import pytest
import torch

from czsl.data import LabelSpace, generate_synthetic, init_semantic_embeddings, load_manifest
from czsl.model import ModelConfig, ThreeBranchNet
from czsl.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3x3 primitives, 7 seen / 2 unseen pairs, 6 images per pair at 32px."""
    root = tmp_path_factory.mktemp("tiny-data")
    generate_synthetic(root, n_attrs=3, n_objs=3, seen_fraction=7 / 9,
                       images_per_pair=6, image_size=32, seed=1)
    space, manifest = load_manifest(root / "manifest.tsv")
    return root, space, manifest


def small_space():
    """2x2 primitives, 3 seen pairs + 1 unseen."""
    return LabelSpace(
        attributes=("dry", "wet"),
        objects=("cat", "dog"),
        compositions=((0, 0), (0, 1), (1, 0), (1, 1)),
        seen_mask=(True, True, True, False),
    )


def seven_node_space():
    """The worked example: A={red, blue}, O={hat, shoe}, Y has 3 triples."""
    return LabelSpace(
        attributes=("red", "blue"),
        objects=("hat", "shoe"),
        compositions=((0, 0), (1, 0), (0, 1)),  # red-hat, blue-hat, red-shoe
        seen_mask=(True, True, True),
    )


def mini_model_config(image_size=32, **overrides):
    """Small enough for double-precision finite-difference checks."""
    kwargs = dict(
        image_size=image_size,
        stage_channels=(4, 8, 12, 16),
        predictor_channels=(4, 6),
        target_channels=8,
        embed_dim=8,
        gcn_hidden=16,
        head_hidden=16,
        pool_heads=1,
        strategy="learned",
        pooling="attention",
        tau=2.0,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def make_mini_net(space=None, image_size=32, dtype=torch.float64, seed=0, **overrides):
    space = space or small_space()
    config = mini_model_config(image_size=image_size, **overrides)
    embeddings = init_semantic_embeddings(space, config.embed_dim, seed=seed)
    return ThreeBranchNet(space, embeddings, config, seed=seed).to(dtype)


def mini_train_config(**overrides):
    kwargs = dict(
        image_size=32,
        stage_channels=(4, 8, 12, 16),
        predictor_channels=(4, 6),
        target_channels=8,
        embed_dim=8,
        gcn_hidden=16,
        head_hidden=16,
        tau=2.0,
        alpha=1.0,
        lr=1e-3,
        epochs=1,
        batch_size=8,
        seed=5,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def random_images(n, size=32, dtype=torch.float32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=gen, dtype=torch.float32).to(dtype)


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}", flush=True)
