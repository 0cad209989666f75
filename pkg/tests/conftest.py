import numpy as np
import pytest

from mdsrec.data import InteractionDataset, make_batches, split_leave_one_out
from mdsrec.model import MDSRec, ModelConfig

TOY_SEQUENCES = ([0, 1, 2, 3, 4, 5, 6], [2, 4, 6, 7, 1, 3], [5, 7, 0, 3, 2])


def toy_config(**overrides) -> ModelConfig:
    base = dict(d=8, n_layers=1, n_heads=2, max_len=6, H=3, k=2, dtype="float64", batch_size=8)
    base.update(overrides)
    return ModelConfig(**base).validate()


def toy_split(sequences=TOY_SEQUENCES, n_items=8, max_len=6):
    seqs = [np.array(s, dtype=np.int64) for s in sequences]
    return split_leave_one_out(InteractionDataset(len(seqs), n_items, seqs, max_len=max_len))


def toy_features(n_items=8, seed=0):
    rng = np.random.default_rng(seed)
    return {"visual": rng.standard_normal((n_items, 5)), "textual": rng.standard_normal((n_items, 4))}


def toy_model(config=None, randomize=True, seed=0):
    """Tiny model with every parameter pushed away from its init values."""
    config = config or toy_config()
    split = toy_split(max_len=config.max_len)
    model = MDSRec.from_data(config, split, toy_features(seed=seed))
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for name, p in model.params.items():
            p.data[...] = rng.standard_normal(p.shape) * 0.5 + (1.0 if name.endswith("_g") else 0.0)
    batch = next(make_batches(split, 8, config.max_len, mode="train"))
    return model, split, batch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
