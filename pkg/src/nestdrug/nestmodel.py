"""Context-conditional molecular network: MPNN encoder, hierarchical context
embeddings, feature-wise modulation variants, and multi-task heads.

Fusion variants share one contract: ``fuse(h_mol, c_vec) -> h_mod`` with
h_mod the same width as h_mol. The scale/shift MLPs are zero-initialized in
their final layers (scale bias one, shift bias zero) so modulation starts as
the exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensorcore as tc
from .errors import (
    ConfigError,
    EmptyMoleculeError,
    IdOutOfRangeError,
    UnknownTaskError,
)
from .evalkit import one_way_f
from .molgraph import ATOM_FEATURE_DIM, BOND_FEATURE_DIM, MolGraph
from .tensorcore import Tensor

FUSION_VARIANTS = (
    "none", "concat_frozen", "concat_trained", "additive", "multiplicative",
    "film", "hypernetwork",
)

TASK_KINDS = ("classification", "regression")


@dataclass
class ModelConfig:
    hidden: int = 256
    layers: int = 6
    l1_capacity: int = 64
    l2_capacity: int = 8
    l3_capacity: int = 8
    l1_dim: int = 128
    l2_dim: int = 64
    l3_dim: int = 32
    film_hidden: int = 256
    head_hidden: tuple[int, ...] = (256, 128)
    dropout: float = 0.1
    fusion: str = "film"
    head_norm: bool = True
    hyper_rank: int = 16
    tasks: dict = field(default_factory=lambda: {0: "classification"})

    @property
    def mol_dim(self) -> int:
        return 2 * self.hidden

    @property
    def ctx_dim(self) -> int:
        return self.l1_dim + self.l2_dim + self.l3_dim

    def validate(self):
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.fusion!r}")
        if self.hidden < 1 or self.layers < 1:
            raise ConfigError("hidden and layers must be positive")
        if not self.tasks:
            raise ConfigError("at least one task head required")
        for tid, kind in self.tasks.items():
            if kind not in TASK_KINDS:
                raise ConfigError(f"task {tid}: unknown kind {kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        d["tasks"] = {str(k): v for k, v in self.tasks.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["head_hidden"] = tuple(d.get("head_hidden", (256, 128)))
        d["tasks"] = {int(k): v for k, v in d.get("tasks", {"0": "classification"}).items()}
        return cls(**d)


@dataclass
class GraphBatch:
    atom_x: np.ndarray          # (N, 70)
    bond_x: np.ndarray          # (M_directed, 9)
    src: np.ndarray             # (M_directed,)
    dst: np.ndarray             # (M_directed,)
    mol_of: np.ndarray          # (N,)
    n_mols: int


def _graph_arrays(g: MolGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed edge arrays (src, dst, bond_x) cached on the graph object."""
    cached = getattr(g, "_edge_arrays", None)
    if cached is not None:
        return cached
    if g.num_bonds:
        a = np.array([b.a for b in g.bonds], dtype=np.int64)
        b2 = np.array([b.b for b in g.bonds], dtype=np.int64)
        src = np.concatenate([a, b2])
        dst = np.concatenate([b2, a])
        bond_x = np.concatenate([g.bond_features, g.bond_features], axis=0)
    else:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
        bond_x = np.zeros((0, BOND_FEATURE_DIM))
    arrays = (src, dst, bond_x)
    object.__setattr__(g, "_edge_arrays", arrays)  # derived, deterministic
    return arrays


def make_batch(graphs: list[MolGraph]) -> GraphBatch:
    if not graphs:
        raise EmptyMoleculeError("empty batch")
    atom_parts, bond_parts, srcs, dsts, mols = [], [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        if g.num_atoms == 0:
            raise EmptyMoleculeError(f"molecule {gi} has no atoms")
        atom_parts.append(g.atom_features)
        mols.append(np.full(g.num_atoms, gi, dtype=np.int64))
        src, dst, bond_x = _graph_arrays(g)
        srcs.append(src + offset)
        dsts.append(dst + offset)
        bond_parts.append(bond_x)
        offset += g.num_atoms
    return GraphBatch(
        atom_x=np.concatenate(atom_parts, axis=0),
        bond_x=np.concatenate(bond_parts, axis=0),
        src=np.concatenate(srcs),
        dst=np.concatenate(dsts),
        mol_of=np.concatenate(mols),
        n_mols=len(graphs),
    )


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """All learnable tensors, reproducible from the seed.

    Linear layers use uniform fan-in scaling; embedding tables N(0, 0.02^2);
    modulation final layers zeroed (scale bias one, shift bias zero) so
    fusion starts as identity. The concat_frozen projection is allocated with
    requires_grad=False and never joins the optimizer.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    h = config.hidden
    params: dict[str, Tensor] = {}

    def linear(name: str, fan_in: int, fan_out: int, zero: bool = False,
               bias_value: float = 0.0, trainable: bool = True,
               bias: bool = True):
        if zero:
            w = np.zeros((fan_in, fan_out))
            b = np.full(fan_out, bias_value)
        else:
            w = _uniform_fan_in(rng, fan_in, (fan_in, fan_out))
            b = _uniform_fan_in(rng, fan_in, (fan_out,))
        params[f"{name}.W"] = Tensor(w, requires_grad=trainable)
        if bias:
            params[f"{name}.b"] = Tensor(b, requires_grad=trainable)

    linear("input", ATOM_FEATURE_DIM, h)
    for t in range(config.layers):
        linear(f"mp{t}.msg", h + BOND_FEATURE_DIM, h)
        for gate in ("z", "r", "h"):
            linear(f"mp{t}.gru.W{gate}", h, h)
            linear(f"mp{t}.gru.U{gate}", h, h, bias=False)

    for name, cap, dim in (("ctx.l1", config.l1_capacity, config.l1_dim),
                           ("ctx.l2", config.l2_capacity, config.l2_dim),
                           ("ctx.l3", config.l3_capacity, config.l3_dim)):
        table = rng.normal(0, 0.02, (cap, dim))
        table[0, :] = 0.0  # row 0 is the generic context: a pinned zero embedding
        params[name] = Tensor(table, requires_grad=True)
    linear("ctx.proj", config.ctx_dim, config.ctx_dim)

    mol = config.mol_dim
    fh = config.film_hidden
    if config.fusion in ("film", "multiplicative"):
        linear("mod.gamma.l1", config.ctx_dim, fh)
        linear("mod.gamma.l2", fh, mol, zero=True, bias_value=1.0)
    if config.fusion in ("film", "additive"):
        linear("mod.beta.l1", config.ctx_dim, fh)
        linear("mod.beta.l2", fh, mol, zero=True, bias_value=0.0)
    if config.fusion in ("concat_frozen", "concat_trained"):
        linear("mod.cat", mol + config.ctx_dim, mol,
               trainable=config.fusion == "concat_trained")
    if config.fusion == "hypernetwork":
        r = config.hyper_rank
        linear("mod.hyper.l1", config.ctx_dim, fh)
        linear("mod.hyper.l2", fh, mol * r + r * mol + mol)

    for tid in sorted(config.tasks):
        dims = (mol,) + tuple(config.head_hidden) + (1,)
        for li in range(len(dims) - 1):
            linear(f"head{tid}.l{li}", dims[li], dims[li + 1])
            if config.head_norm and li < len(dims) - 2:
                params[f"head{tid}.n{li}.g"] = Tensor(np.ones(dims[li + 1]),
                                                      requires_grad=True)
                params[f"head{tid}.n{li}.b"] = Tensor(np.zeros(dims[li + 1]),
                                                      requires_grad=True)
    return params


PARAM_GROUP_PREFIXES = {
    "backbone": ("input.", "mp"),
    "context": ("ctx.",),
    "film": ("mod.",),
    "heads": ("head",),
}


def param_group_names(params: dict[str, Tensor]) -> dict[str, list[str]]:
    """Stable name partition used for differential learning rates."""
    groups: dict[str, list[str]] = {g: [] for g in PARAM_GROUP_PREFIXES}
    for name in sorted(params):
        if not params[name].requires_grad:
            continue  # frozen projections never join the optimizer
        for group, prefixes in PARAM_GROUP_PREFIXES.items():
            if any(name.startswith(p) for p in prefixes):
                groups[group].append(name)
                break
        else:
            raise ConfigError(f"parameter {name} matches no group")
    return groups


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


class NestModel:
    """Bundles config and parameters; forward passes are pure w.r.t. params."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "NestModel":
        return cls(config, init_params(config, seed))

    # -- persistence --------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        arrays = {name: p.data for name, p in self.params.items()}
        meta = {
            "config": self.config.to_dict(),
            "parameter_count": parameter_count(self.params),
            "frozen": sorted(n for n, p in self.params.items()
                             if not p.requires_grad),
        }
        if extra_meta:
            meta["extra"] = extra_meta
        tc.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "NestModel":
        arrays, meta = tc.load_checkpoint(path)
        config = ModelConfig.from_dict(meta["config"])
        frozen = set(meta.get("frozen", []))
        params = {
            name: Tensor(arr, requires_grad=name not in frozen)
            for name, arr in arrays.items()
        }
        return cls(config, params)

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def restore_arrays(self, arrays: dict[str, np.ndarray]):
        for name, arr in arrays.items():
            self.params[name].data = arr.copy()

    # -- forward pieces ------------------------------------------------------
    def _linear(self, name: str, x: Tensor) -> Tensor:
        return tc.add(tc.matmul(x, self.params[f"{name}.W"]), self.params[f"{name}.b"])

    def encode_batch(self, batch: GraphBatch, atom_x: Tensor | None = None) -> Tensor:
        """Message passing then mean||max pooling -> (n_mols, mol_dim).

        ``atom_x`` overrides the batch's atom features (used by attribution
        to differentiate w.r.t. inputs on a fixed topology).
        """
        X = atom_x if atom_x is not None else Tensor(batch.atom_x)
        bond_x = Tensor(batch.bond_x)
        n_atoms = batch.atom_x.shape[0]
        H = self._linear("input", X)
        has_edges = batch.src.size > 0
        for t in range(self.config.layers):
            if has_edges:
                hu = tc.gather_rows(H, batch.src)
                msg_in = tc.concat([hu, bond_x], axis=1)
                msgs = self._linear(f"mp{t}.msg", msg_in)
                m = tc.segment_sum(msgs, batch.dst, n_atoms)
            else:
                m = Tensor(np.zeros((n_atoms, self.config.hidden)))
            z = tc.sigmoid(tc.add(self._linear(f"mp{t}.gru.Wz", m),
                                  tc.matmul(H, self.params[f"mp{t}.gru.Uz.W"])))
            r = tc.sigmoid(tc.add(self._linear(f"mp{t}.gru.Wr", m),
                                  tc.matmul(H, self.params[f"mp{t}.gru.Ur.W"])))
            cand = tc.tanh(tc.add(self._linear(f"mp{t}.gru.Wh", m),
                                  tc.matmul(tc.mul(r, H),
                                            self.params[f"mp{t}.gru.Uh.W"])))
            one_minus_z = tc.sub(Tensor(np.ones_like(z.data)), z)
            H = tc.add(tc.mul(one_minus_z, H), tc.mul(z, cand))
        mean_pool = tc.segment_mean(H, batch.mol_of, batch.n_mols)
        max_pool = tc.segment_max(H, batch.mol_of, batch.n_mols)
        return tc.concat([mean_pool, max_pool], axis=1)

    def encode_molecule(self, m: MolGraph) -> np.ndarray:
        """Single-molecule embedding as numpy (inference convenience)."""
        return self.encode_batch(make_batch([m])).data[0]

    def context_vectors(self, contexts) -> Tensor:
        """(B, 3) context id rows -> (B, ctx_dim) projected embeddings."""
        ids = np.asarray(contexts, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids.reshape(1, -1)
        caps = (self.config.l1_capacity, self.config.l2_capacity,
                self.config.l3_capacity)
        for col, cap in enumerate(caps):
            bad = (ids[:, col] < 0) | (ids[:, col] >= cap)
            if bad.any():
                raise IdOutOfRangeError(
                    f"context level {col + 1} id out of range [0, {cap})")
        e1 = tc.gather_rows(self.params["ctx.l1"], ids[:, 0])
        e2 = tc.gather_rows(self.params["ctx.l2"], ids[:, 1])
        e3 = tc.gather_rows(self.params["ctx.l3"], ids[:, 2])
        return self._linear("ctx.proj", tc.concat([e1, e2, e3], axis=1))

    def gamma_beta(self, c_vec: Tensor) -> tuple[Tensor | None, Tensor | None]:
        gamma = beta = None
        if self.config.fusion in ("film", "multiplicative"):
            hg = tc.relu(self._linear("mod.gamma.l1", c_vec))
            gamma = self._linear("mod.gamma.l2", hg)
        if self.config.fusion in ("film", "additive"):
            hb = tc.relu(self._linear("mod.beta.l1", c_vec))
            beta = self._linear("mod.beta.l2", hb)
        return gamma, beta

    def fuse(self, h_mol: Tensor, c_vec: Tensor) -> Tensor:
        variant = self.config.fusion
        if variant == "none":
            return h_mol
        if variant in ("concat_frozen", "concat_trained"):
            return self._linear("mod.cat", tc.concat([h_mol, c_vec], axis=1))
        if variant == "hypernetwork":
            return self._hyper_fuse(h_mol, c_vec)
        gamma, beta = self.gamma_beta(c_vec)
        if variant == "multiplicative":
            return tc.mul(gamma, h_mol)
        if variant == "additive":
            return tc.add(h_mol, beta)
        return tc.add(tc.mul(gamma, h_mol), beta)  # film

    def _hyper_fuse(self, h_mol: Tensor, c_vec: Tensor) -> Tensor:
        mol, r = self.config.mol_dim, self.config.hyper_rank
        hidden = tc.relu(self._linear("mod.hyper.l1", c_vec))
        flat = self._linear("mod.hyper.l2", hidden)  # (B, mol*r + r*mol + mol)
        rows = []
        n = h_mol.data.shape[0]
        for i in range(n):
            fi = tc.narrow(flat, 0, i, 1)
            u = tc.reshape(tc.narrow(fi, 1, 0, mol * r), (mol, r))
            v = tc.reshape(tc.narrow(fi, 1, mol * r, r * mol), (r, mol))
            bias = tc.narrow(fi, 1, mol * r + r * mol, mol)
            hi = tc.narrow(h_mol, 0, i, 1)
            rows.append(tc.add(tc.matmul(tc.matmul(hi, u), v), bias))
        return tc.concat(rows, axis=0)

    def head(self, h_mod: Tensor, task_id: int, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        if task_id not in self.config.tasks:
            raise UnknownTaskError(f"no head for task {task_id}")
        dims = (self.config.mol_dim,) + tuple(self.config.head_hidden) + (1,)
        x = h_mod
        for li in range(len(dims) - 1):
            x = self._linear(f"head{task_id}.l{li}", x)
            if li < len(dims) - 2:
                if self.config.head_norm:
                    x = self._standardize(x, f"head{task_id}.n{li}")
                x = tc.relu(x)
                if train and self.config.dropout > 0.0:
                    if rng is None:
                        raise ConfigError("training-mode head needs an rng")
                    x = tc.dropout(x, self.config.dropout, rng)
        return tc.reshape(x, (x.data.shape[0],))

    def _standardize(self, x: Tensor, name: str) -> Tensor:
        """Per-sample standardization with learned scale/shift.

        Stands in for batch normalization so batch-size-1 inference is
        well-defined; disable with head_norm=False.
        """
        mu = tc.tmean(x, axis=1, keepdims=True)
        centered = tc.sub(x, mu)
        var = tc.tmean(tc.mul(centered, centered), axis=1, keepdims=True)
        norm = tc.div(centered, tc.sqrt(tc.add(var, Tensor(np.array([[1e-6]])))))
        return tc.add(tc.mul(norm, self.params[f"{name}.g"]),
                      self.params[f"{name}.b"])

    def forward(self, batch: GraphBatch, contexts, task_id: int,
                train: bool = False, rng: np.random.Generator | None = None,
                atom_x: Tensor | None = None) -> Tensor:
        h_mol = self.encode_batch(batch, atom_x=atom_x)
        c_vec = self.context_vectors(contexts)
        h_mod = self.fuse(h_mol, c_vec)
        return self.head(h_mod, task_id, train=train, rng=rng)

    def predict(self, m: MolGraph, context, task_id: int = 0) -> float:
        """Eval-mode scalar prediction: logit for classification tasks."""
        out = self.forward(make_batch([m]), [list(context)], task_id)
        return float(out.data[0])

    def predict_scores(self, graphs: list[MolGraph], contexts,
                       task_id: int = 0, batch_size: int = 256) -> np.ndarray:
        scores = []
        for start in range(0, len(graphs), batch_size):
            chunk = graphs[start:start + batch_size]
            ctx = contexts[start:start + len(chunk)]
            out = self.forward(make_batch(chunk), ctx, task_id)
            scores.append(out.data)
        return np.concatenate(scores)


def film_statistics(model: NestModel, contexts, families=None) -> dict:
    """Scale/shift summary per context plus an optional family F-test.

    Returns rows of per-context mean +/- std over modulation dimensions and,
    when a family labeling is supplied, a one-way F statistic of the
    between-family vs within-family variance of the per-context scale means.
    """
    if model.config.fusion not in ("film", "multiplicative", "additive"):
        raise ConfigError("modulation statistics need a scale/shift variant")
    rows = []
    gamma_means = []
    for ctx in contexts:
        c_vec = model.context_vectors([list(ctx)])
        gamma, beta = model.gamma_beta(c_vec)
        row = {"context": tuple(int(x) for x in ctx)}
        if gamma is not None:
            row["gamma_mean"] = float(gamma.data.mean())
            row["gamma_std"] = float(gamma.data.std())
            gamma_means.append(row["gamma_mean"])
        if beta is not None:
            row["beta_mean"] = float(beta.data.mean())
            row["beta_std"] = float(beta.data.std())
        rows.append(row)
    out = {"per_context": rows}
    if families is not None and gamma_means:
        f_stat, p = one_way_f(gamma_means, list(families))
        out["family_f"] = f_stat
        out["family_p"] = p
    return out
