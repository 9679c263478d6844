"""Flat INI-style configuration with named sections; unknown keys are
errors, not warnings."""

import configparser
import hashlib

from qsde.harness import StudySpec

_SCHEMA = {
    "partition": {"T"},
    "noise": {"mode", "seed"},
    "drift": {"name", "c", "alpha", "amplitude"},
    "driver": {"name", "gamma", "a", "c", "alpha0", "truncation"},
    "terminal": {"kind", "K", "bound"},
    "weights": {"kind", "R"},
    "condexp": {"backend", "family", "degree", "n_bins", "m_inner"},
    "study": {"scheme", "n_sweep", "paths", "p", "x0", "ref_ratio", "out", "threads"},
    "zvonkin": {"lam", "tol", "max_iter", "L", "dx", "nt", "target"},
}

_FLOAT_KEYS = {"T", "c", "alpha", "amplitude", "gamma", "a", "alpha0", "K", "bound",
               "x0", "lam", "tol", "L", "dx", "target"}
_INT_KEYS = {"seed", "paths", "p", "ref_ratio", "degree", "n_bins", "m_inner",
             "max_iter", "nt", "threads"}


def _convert(key: str, value: str):
    if key in ("truncation", "R") and value != "default":
        return float(value)
    if key == "n_sweep":
        return tuple(int(v) for v in value.replace(",", " ").split())
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _INT_KEYS:
        return int(value)
    return value


def parse_config(text: str) -> dict:
    """Sections -> {key: typed value}; rejects unknown sections and keys."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    out: dict = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        out[section] = {}
        for key, value in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            out[section][key] = _convert(key, value)
    return out


def config_hash(cfg: dict, seed: int) -> str:
    lines = [f"seed={seed}"]
    for section in sorted(cfg):
        for key in sorted(cfg[section]):
            lines.append(f"{section}.{key}={cfg[section][key]!r}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def study_from_config(cfg: dict, seed=None, threads=None, out=None) -> StudySpec:
    """Build a StudySpec, with CLI overrides for seed/threads/out."""
    study = dict(cfg.get("study", {}))
    noise = dict(cfg.get("noise", {}))
    scheme = study.get("scheme", "btz")
    eff_seed = int(seed if seed is not None else noise.get("seed", 0))
    spec = StudySpec(
        scheme=scheme,
        n_sweep=tuple(study.get("n_sweep", (8, 16, 32))),
        paths=int(study.get("paths", 1000)),
        seed=eff_seed,
        p=int(study.get("p", 1)),
        T=float(cfg.get("partition", {}).get("T", 1.0)),
        x0=float(study.get("x0", 0.0)),
        drift=dict(cfg.get("drift", {"name": "zero"})),
        driver=dict(cfg.get("driver", {"name": "q4"})),
        terminal=dict(cfg.get("terminal", {"kind": "clamp", "K": 1.0})),
        weights=dict(cfg.get("weights", {"kind": "clamped-gaussian"})),
        condexp=dict(cfg.get("condexp", {"backend": "lsmc", "degree": 3})),
        ref_ratio=int(study.get("ref_ratio", 8)),
        threads=int(threads if threads is not None else study.get("threads", 1)),
        out=out if out is not None else study.get("out"),
        config_hash=config_hash(cfg, eff_seed),
        zvonkin=dict(cfg.get("zvonkin", {})),
    )
    return spec
