"""JSON experiment files: parsing, validation and serialisation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .equilibrium import SolverOptions
from .learner import RunConfig
from .network import Arc, Network, NetworkError, validate

SHIPPED = ("fig1-parallel", "fig1-general")


class ConfigParseError(ValueError):
    pass


@dataclass
class ExperimentFile:
    network: Network
    theta_star: list[float]
    beta_star: float
    T: int = 2500
    lam: float = 0.01
    c_beta: float = 0.1
    C_theta_bound: float = 10.0
    seed: int = 0
    tol: float = 1e-10
    damping: float = 0.5
    max_iter: int = 10_000
    out_dir: str = "runs"
    formats: list[str] = field(default_factory=lambda: ["csv"])
    name: str = ""

    def problems(self) -> list[str]:
        """Everything that makes this file unusable; empty when valid."""
        out = list(validate(self.network).violations)
        if len(self.theta_star) != self.network.n_arcs:
            out.append(
                f"theta_star length mismatch: {len(self.theta_star)} values for {self.network.n_arcs} arcs"
            )
        elif any(not (0 < th <= self.C_theta_bound) for th in self.theta_star):
            out.append(f"theta_star entries must lie in (0, C_theta_bound={self.C_theta_bound}]")
        if not self.c_beta > 0:
            out.append("c_beta must be positive")
        elif not self.beta_star > self.c_beta:
            out.append(f"beta_star={self.beta_star} must exceed c_beta={self.c_beta}")
        if self.T < 1:
            out.append("T must be at least 1")
        if not self.lam > 0:
            out.append("lambda must be positive")
        if not 0 < self.damping <= 1:
            out.append("damping must lie in (0, 1]")
        return out

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol=self.tol, damping=self.damping, max_iter=self.max_iter)

    def run_config(self, **overrides: Any) -> RunConfig:
        kw: dict[str, Any] = dict(
            network=self.network,
            theta_star=np.asarray(self.theta_star, float),
            beta_star=self.beta_star,
            T=self.T,
            lam=self.lam,
            c_beta=self.c_beta,
            C_theta_bound=self.C_theta_bound,
            seed=self.seed,
            options=self.solver_options(),
        )
        kw.update(overrides)
        return RunConfig(**kw)

    def to_dict(self) -> dict[str, Any]:
        net = self.network
        return {
            "name": self.name,
            "network": {
                "nodes": list(net.nodes),
                "arcs": [{"id": a.id, "tail": a.tail, "head": a.head} for a in net.arcs],
                "origin": net.origin,
                "destination": net.destination,
                "g_o": net.inflow,
            },
            "truth": {"theta_star": list(self.theta_star), "beta_star": self.beta_star},
            "algorithm": {
                "T": self.T,
                "lambda": self.lam,
                "c_beta": self.c_beta,
                "C_theta_bound": self.C_theta_bound,
                "seed": self.seed,
                "tol": self.tol,
                "damping": self.damping,
                "max_iter": self.max_iter,
            },
            "output": {"directory": self.out_dir, "formats": list(self.formats)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _line_context(text: str, lineno: int) -> str:
    lines = text.splitlines()
    if 1 <= lineno <= len(lines):
        return f"line {lineno}: {lines[lineno - 1].strip()}"
    return f"line {lineno}"


def _require(block: dict, key: str, where: str) -> Any:
    if key not in block:
        raise ConfigParseError(f"missing key {where}.{key}")
    return block[key]


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigParseError(f"{where} must be a finite number (got {value!r})")
    return float(value)


def parse_experiment(text: str, source: str = "<string>") -> ExperimentFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{source}: {exc.msg} at {_line_context(text, exc.lineno)}") from exc
    if not isinstance(doc, dict):
        raise ConfigParseError(f"{source}: top level must be an object")

    nb = _require(doc, "network", "")
    arcs = []
    for k, a in enumerate(_require(nb, "arcs", "network")):
        if isinstance(a, dict):
            arcs.append(Arc(str(a.get("id", f"a{k + 1}")), str(_require(a, "tail", f"arcs[{k}]")), str(_require(a, "head", f"arcs[{k}]"))))
        elif isinstance(a, (list, tuple)) and len(a) == 2:
            arcs.append(Arc(f"a{k + 1}", str(a[0]), str(a[1])))
        else:
            raise ConfigParseError(f"network.arcs[{k}] must be a [tail, head] pair or an object")
    try:
        network = Network(
            [str(n) for n in _require(nb, "nodes", "network")],
            arcs,
            str(_require(nb, "origin", "network")),
            str(_require(nb, "destination", "network")),
            _number(_require(nb, "g_o", "network"), "network.g_o"),
        )
    except NetworkError as exc:
        raise ConfigParseError(f"{source}: {exc}") from exc

    tb = _require(doc, "truth", "")
    theta = [_number(x, "truth.theta_star") for x in _require(tb, "theta_star", "truth")]
    ab = doc.get("algorithm", {})
    ob = doc.get("output", {})
    return ExperimentFile(
        network=network,
        theta_star=theta,
        beta_star=_number(_require(tb, "beta_star", "truth"), "truth.beta_star"),
        T=int(ab.get("T", 2500)),
        lam=_number(ab.get("lambda", 0.01), "algorithm.lambda"),
        c_beta=_number(ab.get("c_beta", 0.1), "algorithm.c_beta"),
        C_theta_bound=_number(ab.get("C_theta_bound", 10.0), "algorithm.C_theta_bound"),
        seed=int(ab.get("seed", 0)),
        tol=_number(ab.get("tol", 1e-10), "algorithm.tol"),
        damping=_number(ab.get("damping", 0.5), "algorithm.damping"),
        max_iter=int(ab.get("max_iter", 10_000)),
        out_dir=str(ob.get("directory", "runs")),
        formats=list(ob.get("formats", ["csv"])),
        name=str(doc.get("name", "")),
    )


def shipped_path(name: str) -> Path:
    return Path(str(resources.files("mte_tollkit") / "configs" / f"{name}.json"))


def load_experiment(path: str | Path) -> ExperimentFile:
    """Read an experiment file; bare shipped names (e.g. ``fig1-parallel``) resolve to bundled configs."""
    p = Path(path)
    if not p.exists() and str(path) in SHIPPED:
        p = shipped_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_experiment(text, str(p))
