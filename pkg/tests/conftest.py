import hashlib
import json

import pytest

from fmqmc.cfm_train import TrainConfig, load_checkpoint, save_checkpoint, train
from fmqmc.targets import get_target

# small fields trained just long enough to be non-trivial; module tests only need a realistic shape
QUICK = {
    "gmm2d": dict(width=32, n_blocks=2, K=4, n_steps=1500, batch_size=512, ema_decay=0.99),
    "banana": dict(width=32, n_blocks=2, K=4, n_steps=1500, batch_size=512, ema_decay=0.99),
    "gmm30d": dict(width=32, n_blocks=2, K=4, n_steps=600, batch_size=256, ema_decay=0.99),
}


def cached_field(cache_dir, target_name, **kw):
    cfg = TrainConfig(target=target_name, **kw)
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    path = cache_dir / f"{target_name}-{key}.ckpt"
    if path.exists():
        return load_checkpoint(path)
    p, _ = train(cfg, get_target(target_name))
    save_checkpoint(p, path, {"train": cfg.to_dict()})
    return p


@pytest.fixture(scope="session")
def model_cache(request):
    return request.config.cache.mkdir("fmqmc-models")


@pytest.fixture(scope="session")
def quick_field(model_cache):
    """``quick_field(name)`` returns a briefly trained velocity field, cached across sessions."""
    memo = {}

    def get(name):
        if name not in memo:
            memo[name] = cached_field(model_cache, name, **QUICK[name])
        return memo[name]

    return get


def desk_config(name):
    """Resolved desk-profile settings and the matching training kwargs for ``cached_field``."""
    from fmqmc.cli import _train_config, resolve_config

    cfg = resolve_config("desk", target=name)
    kw = _train_config(cfg).to_dict()
    kw.pop("target")
    return cfg, kw


@pytest.fixture(scope="session")
def desk_field(model_cache):
    """``desk_field(name)`` returns ``(params, resolved_config)`` for the desk-profile model."""
    memo = {}

    def get(name):
        if name not in memo:
            cfg, kw = desk_config(name)
            memo[name] = cached_field(model_cache, name, **kw), cfg
        return memo[name]

    return get


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """``criterion(k, passed, detail)`` records one acceptance verdict for the terminal summary."""

    def record(k, passed, detail):
        line = f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
