import numpy as np
import pytest
import torch


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion, when the suite ran."""
    try:
        from test_acceptance import CRITERION_RESULTS
    except ImportError:
        return
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERION_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

from sslbackdoor.attack import AttackSpec, ReferenceSet, TargetPair
from sslbackdoor.data import ShadowDataset, make_synthetic_dataset, square_trigger
from sslbackdoor.encoder import build_encoder


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic_dataset(4, 30, 32, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def toy_encoder(seed=0, image_size=4, feature_dim=8, hidden=8):
    """Double-precision toy encoder small enough for finite differences."""
    enc = build_encoder(
        "toy-mlp",
        image_size=image_size,
        feature_dim=feature_dim,
        seed=seed,
        dtype=torch.float64,
        hidden=hidden,
    )
    return enc


def toy_images(n, image_size=4, seed=0):
    return np.random.default_rng(seed).random((n, image_size, image_size, 3))


def toy_attack_spec(n_shadow=6, image_size=4, seed=5, pairs=1, refs=(1,)):
    rng = np.random.default_rng(seed)
    shadow = ShadowDataset(rng.random((n_shadow, image_size, image_size, 3)))
    corners = ["bottom-right", "upper-left", "center"]
    target_pairs = []
    for i in range(pairs):
        trigger = square_trigger(image_size, size=2, corner=corners[i % 3], name=f"t{i}")
        ref_imgs = rng.random((refs[i % len(refs)], image_size, image_size, 3))
        target_pairs.append(
            TargetPair(task_id=f"task{i}", target_class=i, trigger=trigger,
                       references=ReferenceSet(ref_imgs))
        )
    return AttackSpec(pairs=target_pairs, shadow=shadow)
