import numpy as np
import pytest

from cmi_tune.data import synth_task, synth_vocab
from cmi_tune.model import ModelConfig, init_params


def tiny_config(**over) -> ModelConfig:
    base = dict(vocab_size=12, embed_dim=8, context_len=12, num_layers=2, num_heads=2, ff_mult=2,
                num_classes=2)
    base.update(over)
    return ModelConfig(**base)


def jitter(params, seed: int, scale: float = 0.3):
    """Move every tensor off its structured init so gradient checks see generic values."""
    rng = np.random.default_rng(seed)
    for t in params.tensors.values():
        t.data += rng.normal(0.0, scale, size=t.shape)
    return params


@pytest.fixture
def vocab():
    return synth_vocab()


@pytest.fixture
def tiny_params():
    return jitter(init_params(tiny_config(), seed=0), seed=1)


@pytest.fixture
def tiny_task(vocab):
    train = synth_task("majority_token", 40, 0, vocab, length=8)
    dev = synth_task("majority_token", 20, 1, vocab, length=8, split="dev")
    return train, dev


# -- acceptance summary ---------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["notes"])
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
