import time

import numpy as np
import pytest

ACCEPTANCE: dict[int, str] = {}
NOTES: list[str] = []


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def note(text: str) -> None:
    """Informational line printed under the criteria; never affects pass/fail."""
    NOTES.append(text)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not NOTES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
    for text in NOTES:
        terminalreporter.write_line(f"  note: {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_bundle():
    from tsxplain.datasets import SyntheticSpec, generate_synthetic, normalize_channels, split

    return normalize_channels(split(generate_synthetic(SyntheticSpec(n_samples=2000, T=100, seed=0)), seed=0))


@pytest.fixture(scope="session")
def trained_hybrid(synthetic_bundle):
    """The full-size hybrid run shared by the end-to-end acceptance checks."""
    from tsxplain.models import build_model
    from tsxplain.training import TrainConfig, train

    model = build_model("hybrid", synthetic_bundle.C, 2, "classification", seed=0)
    start = time.perf_counter()
    ckpt, history = train(model, synthetic_bundle, TrainConfig(lr=1e-3, max_epochs=20, patience=10, seed=0))
    return model, ckpt, history, time.perf_counter() - start


@pytest.fixture(scope="session")
def small_bundle():
    from tsxplain.datasets import SyntheticSpec, generate_synthetic, normalize_channels, split

    return normalize_channels(split(generate_synthetic(SyntheticSpec(n_samples=120, T=40, seed=3)), seed=3))


@pytest.fixture(scope="session")
def fresh_test_sets(synthetic_bundle):
    """Twenty independent synthetic sets (seeds 1000..1019), scaled with the
    training statistics of ``synthetic_bundle``; one per seed of the
    perturbation experiments."""
    from tsxplain.datasets import SyntheticSpec, generate_synthetic

    center = np.asarray(synthetic_bundle.norm_stats["center"])
    scale = np.asarray(synthetic_bundle.norm_stats["scale"])
    out = []
    for s in range(20):
        d = generate_synthetic(SyntheticSpec(n_samples=100, T=synthetic_bundle.T, seed=1000 + s))
        out.append(((d.X - center) / scale, d.y, d.masks.astype(np.float64)))
    return out
