import hashlib
import os
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from reroute.checkpoint import load_checkpoint, save_checkpoint
from reroute.model import ModelConfig, MoEModel

# first calls may include numba compilation
settings.register_profile("repo", deadline=None)
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("REROUTE_CACHE_DIR", ROOT / ".cache"))

# Modules whose code determines the trained weights.
_TRAINING_SOURCES = ("numcore.py", "model.py", "rerouter.py", "kernels.py", "tasks/pretrain.py", "tasks/corpus.py")

ACCEPTANCE_LINES: dict[int, str] = {}


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=50, d_model=16, n_layers=2, n_experts=4, k_active=2, d_ff=16, n_heads=2, max_seq=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return MoEModel(tiny_config(rng_seed=3))


def _checkpoint_key() -> str:
    pkg = resources.files("reroute")
    h = hashlib.sha256(pkg.joinpath("recipes/pretrain_default.cfg").read_bytes())
    for name in _TRAINING_SOURCES:
        h.update(pkg.joinpath(name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def toy_checkpoint() -> Path:
    """Path of the default-recipe checkpoint; trained once and cached by recipe/code hash."""
    path = CACHE / f"toy-{_checkpoint_key()}.moer"
    if not path.exists():
        from reroute.tasks.corpus import gen_corpus
        from reroute.tasks.pretrain import Recipe, pretrain_toy

        recipe = Recipe.from_text(resources.files("reroute").joinpath("recipes/pretrain_default.cfg").read_text())
        items = gen_corpus(size=recipe.train.corpus_size, seed=recipe.train.corpus_seed)
        model, _, _ = pretrain_toy(recipe, items)
        CACHE.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path)
    return path


@pytest.fixture(scope="session")
def toy_model(toy_checkpoint) -> MoEModel:
    return load_checkpoint(toy_checkpoint)


def record_acceptance(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def random_prompts(n: int, length: int, seed: int, vocab: int = 50) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, length) for _ in range(n)]
