"""Versioned JSON fit artifact: everything ``predict`` needs without
refitting (estimates, basis, column roles, free-parameter layout and the
observed information)."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import BasisConfig, ColumnSchema
from .errors import SchemaError
from .kernels import CovParams, SqExpParams
from .likelihood import InformationMatrix, ModelParams, ParamLayout
from .mixing import MixingFamily

FORMAT = "hpfr-fit"
VERSION = 1


@dataclass(frozen=True)
class FittedModel:
    """The parts of a fit used for prediction; duck-types ``FitResult``."""

    params: ModelParams
    basis: BasisConfig
    layout: ParamLayout
    info: InformationMatrix
    schema: ColumnSchema
    converged: bool = True
    loglik: float = float("nan")


def _family_dict(fam):
    return dict(kind=fam.kind, nu=fam.nu, gamma=fam.gamma,
                nu_fixed=fam.nu_fixed, gamma_fixed=fam.gamma_fixed)


def to_dict(result, schema, extra=None):
    p = result.params
    info = result.info
    lay = result.layout
    out = {
        "format": FORMAT,
        "version": VERSION,
        "family": _family_dict(p.fam),
        "beta": p.beta.tolist(),
        "cov": dict(v0=p.cov.theta.v0, w=p.cov.theta.w.tolist(),
                    phi_b=p.cov.phi_b.tolist(), phi_eps=p.cov.phi_eps),
        "basis": dict(domain=list(result.basis.domain), degree=result.basis.degree,
                      knot_count=result.basis.knot_count),
        "schema": schema.to_dict(),
        "layout": dict(n_beta=lay.n_beta, p_x=lay.p_x, p_w=lay.p_w,
                       psi_free=list(lay.psi_free), fam_free=list(lay.fam_free),
                       fam_kind=lay.fam_kind),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "loglik": float(result.loglik),
        "bic": float(result.bic),
        "information": None if info is None else dict(
            names=list(info.names), J=info.J.tolist(), covariance=info.covariance.tolist(),
            flagged=bool(info.flagged), min_eigenvalue=info.min_eigenvalue,
            grad_norm=info.grad_norm),
    }
    if extra:
        out["config"] = extra
    return out


def save(result, schema, path, extra=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(result, schema, extra), fh, indent=1)
        fh.write("\n")


def from_dict(d):
    if d.get("format") != FORMAT:
        raise SchemaError("not an hpfr fit artifact")
    if d.get("version") != VERSION:
        raise SchemaError(f"fit artifact version {d.get('version')!r} is not supported "
                          f"(expected {VERSION})")
    c = d["cov"]
    cov = CovParams(SqExpParams(c["v0"], c["w"]), c["phi_b"], c["phi_eps"])
    params = ModelParams(np.array(d["beta"]), cov, MixingFamily(**d["family"]))
    b = d["basis"]
    basis = BasisConfig(tuple(b["domain"]), b["degree"], b["knot_count"])
    lay = d["layout"]
    layout = ParamLayout(lay["n_beta"], lay["p_x"], lay["p_w"], tuple(lay["psi_free"]),
                         tuple(lay["fam_free"]), lay["fam_kind"])
    info = None
    if d.get("information"):
        i = d["information"]
        info = InformationMatrix(np.array(i["J"]), tuple(i["names"]), np.array(i["covariance"]),
                                 i["flagged"], i["min_eigenvalue"], i["grad_norm"])
    return FittedModel(params, basis, layout, info, ColumnSchema.from_dict(d["schema"]),
                       d["converged"], d["loglik"])


def load(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not valid JSON: {exc}") from None
    return from_dict(d)
