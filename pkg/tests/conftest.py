"""Shared fixtures: the reference scenario and models trained on it, built once per session."""

from dataclasses import dataclass

import numpy as np
import pytest

from iotshield.autoenc import AEModel, fit_autoencoder
from iotshield.features import FeatureVector, extract, feature_matrix, label_vector, split_by_time
from iotshield.flowdata import BENIGN, AttackKind, DeviceTelemetry, FlowRecord, Protocol
from iotshield.forest import ForestModel, ForestParams, QuantizedForest, prune, quantize, train
from iotshield.synthgen import default_scenario, generate, low_rate_scenario

KNOWN_KINDS = (AttackKind.SYN_FLOOD, AttackKind.UDP_FLOOD, AttackKind.HTTP_FLOOD)


@dataclass
class Trained:
    train: list[FeatureVector]
    validation: list[FeatureVector]
    test: list[FeatureVector]
    forest: ForestModel
    pruned: ForestModel
    quantized: QuantizedForest
    ae: AEModel


def _fit(vectors, exclude=()) -> Trained:
    vectors = [v for v in vectors if not (v.label and v.label.attack_kind in exclude)]
    tr, va, te = split_by_time(vectors)
    X, y = feature_matrix(tr), label_vector(tr)
    forest = train(X, y, ForestParams(), seed=42)
    pruned = prune(forest, feature_matrix(va), label_vector(va))
    return Trained(tr, va, te, forest, pruned, quantize(pruned), fit_autoencoder(X[y == 0]))


@pytest.fixture(scope="session")
def default_data():
    return generate(default_scenario())


@pytest.fixture(scope="session")
def default_vectors(default_data):
    return extract(*default_data)


@pytest.fixture(scope="session")
def trained(default_vectors) -> Trained:
    """All four attack kinds, 70/15/15 time split, default hyperparameters."""
    return _fit(default_vectors)


@pytest.fixture(scope="session")
def trained_known_only() -> Trained:
    """Same pipeline on a scenario whose episodes never include low-rate attacks."""
    return _fit(extract(*generate(default_scenario(kinds=KNOWN_KINDS))))


@pytest.fixture(scope="session")
def benign_vectors():
    return extract(*generate(default_scenario(seed=1001, kinds=[])))


@pytest.fixture(scope="session")
def low_rate_vectors():
    return extract(*generate(low_rate_scenario()))


def flow(t, src="a", dst="b", port=443, packets=10, size=1000, label=BENIGN, proto=Protocol.TCP, syn=False):
    return FlowRecord(float(t), src, dst, proto, port, packets, size, 0.5, syn, label)


def sample(t, device="a", cpu=20.0, mem=30.0, sys_rate=100.0):
    return DeviceTelemetry(float(t), device, cpu, mem, sys_rate)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


PIPELINE = (
    ["synth", "--out", "synth"],
    ["extract", "--flows", "synth/flows.csv", "--telemetry", "synth/telemetry.csv", "--out", "features"],
    ["train", "--features", "features/train.csv", "--out", "forest.bin"],
    ["prune", "--model", "forest.bin", "--validation", "features/validation.csv", "--out", "pruned.bin"],
    ["quantize", "--model", "pruned.bin", "--out", "quantized.bin"],
    ["ae-train", "--features", "features/train.csv", "--out", "ae.bin"],
    ["detect", "--forest", "quantized.bin", "--ae", "ae.bin", "--features", "features/test.csv",
     "--out", "detect"],
    ["evaluate", "--trace", "detector=detect/trace.csv", "--forest", "float=pruned.bin",
     "quantized=quantized.bin", "--features", "features/test.csv", "--out", "report.txt"],
)


def run_pipeline(root, seed=42):
    """Run every pipeline stage through the CLI inside ``root`` using relative paths."""
    import os

    from iotshield.cli import main

    root.mkdir(parents=True, exist_ok=True)
    here = os.getcwd()
    os.chdir(root)
    try:
        for argv in PIPELINE:
            code = main(argv + ["--seed", str(seed)])
            assert code == 0, f"{argv[0]} exited with {code}"
    finally:
        os.chdir(here)
    return root


def tree_bytes(root):
    """Map of relative path to file contents for every file under ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
