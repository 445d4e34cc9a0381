"""Variance profiles: construction, validation, flow, and serialization.

A profile stores one W^d x W^d block per block offset (block translation
invariance is structural: S|_{[a],[a]+[x]} is the same matrix for every [a]).
Assembling the full N x N matrix is explicit and memoized.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import BlockLattice

__all__ = [
    "VarianceProfile",
    "ValidationReport",
    "ProfileError",
    "build_translation_invariant",
    "build_wegner_orbital",
    "block_flat_profile",
    "mean_field_profile",
    "validate",
    "interaction_strength",
    "flow_profile",
    "family_member",
    "decompose_core",
    "mean_field_matrix",
    "profile_to_text",
    "profile_from_text",
    "KERNELS",
]

_ROWSUM_TOL = 1e-12


class ProfileError(ValueError):
    """Raised when a profile violates a construction precondition."""


@dataclass
class VarianceProfile:
    """Block-translation-invariant variance profile.

    ``blocks`` maps a flattened block offset [x] in [0, n^d) to the
    W^d x W^d real matrix S|_{[a],[a]+[x]} (identical for all [a]).
    Missing offsets are zero blocks.
    """

    lattice: BlockLattice
    blocks: dict[int, np.ndarray]
    builder: str = "custom"
    builder_params: dict = field(default_factory=dict)

    def __post_init__(self):
        wd = self.lattice.block_volume
        clean = {}
        for off, blk in self.blocks.items():
            arr = np.ascontiguousarray(blk, dtype=float)
            if arr.shape != (wd, wd):
                raise ProfileError(f"block at offset {off} has shape {arr.shape}")
            if arr.min() < 0:
                raise ProfileError(f"negative entry in block at offset {off}")
            arr.setflags(write=False)
            clean[int(off)] = arr
        object.__setattr__(self, "blocks", clean)
        for off, blk in clean.items():
            neg = self.lattice.block_negate(off)
            other = clean.get(neg)
            if other is None or not np.array_equal(blk.T, other):
                raise ProfileError(
                    f"transpose symmetry violated between offsets {off} and {neg}")
        self._assembled = None
        self._lambda2 = None

    # ---- assembly ----------------------------------------------------------

    def block_at(self, offset) -> np.ndarray:
        off = self.lattice.block_index(offset)
        wd = self.lattice.block_volume
        return self.blocks.get(off, np.zeros((wd, wd)))

    def assemble(self) -> np.ndarray:
        """Full N x N matrix; memoized, returned read-only."""
        if self._assembled is None:
            lat = self.lattice
            m, wd = lat.block_count, lat.block_volume
            S = np.zeros((lat.N, lat.N))
            site_idx = [lat.block_sites(a) for a in range(m)]
            for a in range(m):
                rows = site_idx[a]
                for off, blk in self.blocks.items():
                    b = lat.block_shift(a, off)
                    S[np.ix_(rows, site_idx[b])] = blk
            S.setflags(write=False)
            self._assembled = S
        return self._assembled

    @property
    def row_sum(self) -> float:
        """Common row sum (total variance per row); rows are constant."""
        return float(sum(blk.sum(axis=1) for blk in self.blocks.values()).max())

    def row_sum_deviation(self) -> float:
        sums = sum(blk.sum(axis=1) for blk in self.blocks.values())
        return float(np.abs(np.asarray(sums) - 1.0).max())

    def scaled(self, factor: float, builder: str | None = None) -> "VarianceProfile":
        return VarianceProfile(
            self.lattice,
            {off: factor * blk for off, blk in self.blocks.items()},
            builder=builder or self.builder,
            builder_params=dict(self.builder_params),
        )


def mean_field_matrix(lattice: BlockLattice) -> np.ndarray:
    """Assembled S_E: block diagonal, every entry of a diagonal block W^-d."""
    return mean_field_profile(lattice).assemble()


# ---- builders ---------------------------------------------------------------

KERNELS = {
    "uniform": lambda r: 1.0,
    "exponential": lambda r: float(np.exp(-r)),
    "gaussian": lambda r: float(np.exp(-(r**2))),
    "linear": lambda r: 1.0 / (1.0 + r),
}


def mean_field_profile(lattice: BlockLattice) -> VarianceProfile:
    """The mean-field profile S_E (flat diagonal blocks, no interaction)."""
    wd = lattice.block_volume
    blocks = {0: np.full((wd, wd), 1.0 / wd)}
    return VarianceProfile(lattice, blocks, builder="mean_field")


def build_translation_invariant(lattice: BlockLattice, kernel, cutoff: int,
                                name: str = "custom") -> VarianceProfile:
    """Profile S_xy proportional to kernel(||x-y||_L), truncated at cutoff*W.

    The kernel is evaluated on periodic distances; rows are constant by full
    translation invariance, so a single global normalization yields exact
    double stochasticity.
    """
    if cutoff * lattice.W >= lattice.L / 2:
        raise ProfileError(
            f"cutoff*W = {cutoff * lattice.W} overlaps its own periodic image "
            f"(needs < L/2 = {lattice.L / 2})")
    reach = cutoff * lattice.W
    dist = lattice.site_distance_matrix
    weights = np.zeros_like(dist, dtype=float)
    mask = dist <= reach
    vals = {r: float(kernel(r)) for r in np.unique(dist[mask])}
    if any(v < 0 for v in vals.values()):
        raise ProfileError("kernel must be nonnegative")
    for r, v in vals.items():
        weights[(dist == r) & mask] = v
    row = weights[0].sum()
    if row <= 0:
        raise ProfileError("kernel produces a zero row")
    weights /= row
    blocks = {}
    rows0 = lattice.block_sites(0)
    for off in range(lattice.block_count):
        blk = weights[np.ix_(rows0, lattice.block_sites(off))]
        if blk.any():
            blocks[off] = blk
    prof = VarianceProfile(lattice, blocks, builder="translation_invariant",
                           builder_params={"kernel": name, "cutoff": cutoff})
    if prof.row_sum_deviation() > _ROWSUM_TOL:
        raise ProfileError("row sums drifted during construction")
    return prof


def build_wegner_orbital(lattice: BlockLattice, V: np.ndarray,
                         A: dict[int, np.ndarray]) -> VarianceProfile:
    """Wegner orbital profile: diagonal block V, interaction blocks A^[x].

    Requires (A^[x])^T = A^[-x] and nonnegative entries. If the raw row sums
    are not exactly 1, a single global rescale is applied when the rows are
    constant; otherwise the diagonal of V absorbs the per-row deficit,
    provided that keeps V positive. The applied strategy is recorded.
    """
    lat = lattice
    wd = lat.block_volume
    V = np.asarray(V, dtype=float)
    if V.shape != (wd, wd):
        raise ProfileError(f"V must be {wd}x{wd}")
    if not np.array_equal(V, V.T):
        raise ProfileError("V must be symmetric")
    blocks = {0: V.copy()}
    for off, blk in A.items():
        off = lat.block_index(off)
        if off == 0:
            raise ProfileError("offset 0 belongs to V, not A")
        blk = np.asarray(blk, dtype=float)
        if blk.shape != (wd, wd):
            raise ProfileError(f"A block at {off} must be {wd}x{wd}")
        blocks[off] = blk
    for off in list(blocks):
        if off == 0:
            continue
        neg = lat.block_negate(off)
        if neg not in blocks or not np.allclose(blocks[off].T, blocks[neg],
                                                rtol=0, atol=0):
            raise ProfileError(
                f"(A^[{off}])^T != A^[{neg}] transpose condition violated")
    if min(blk.min() for blk in blocks.values()) < 0:
        raise ProfileError("negative entries are not allowed")

    rows = sum(blk.sum(axis=1) for blk in blocks.values())
    strategy = "none"
    if np.abs(rows - 1.0).max() > _ROWSUM_TOL:
        if np.abs(rows - rows[0]).max() <= _ROWSUM_TOL * max(rows[0], 1.0):
            blocks = {off: blk / rows[0] for off, blk in blocks.items()}
            strategy = "global_rescale"
        else:
            newV = blocks[0].copy()
            target = float(rows.max())
            newV[np.diag_indices(wd)] += target - rows
            if newV.min() <= 0:
                raise ProfileError(
                    "rows are not normalizable: diagonal adjustment would "
                    "produce a nonpositive entry")
            blocks[0] = newV
            total = target
            blocks = {off: blk / total for off, blk in blocks.items()}
            strategy = "diagonal_absorb"
    prof = VarianceProfile(lattice, blocks, builder="wegner_orbital",
                           builder_params={"normalization": strategy})
    if prof.row_sum_deviation() > _ROWSUM_TOL:
        raise ProfileError("row sums are not normalizable to 1")
    return prof


def block_flat_profile(lattice: BlockLattice, neighbor_weight: float
                       ) -> VarianceProfile:
    """Flat-block baseline: constant blocks on offsets 0 and +-e_i.

    Each nearest-neighbor block offset carries total per-row mass
    ``neighbor_weight``; the diagonal block takes the remainder.
    """
    if lattice.n < 3:
        raise ProfileError("block_flat needs n >= 3 to separate +-1 offsets")
    wd = lattice.block_volume
    w1 = float(neighbor_weight)
    if not 0 <= w1 * 2 * lattice.d < 1:
        raise ProfileError("neighbor weight must satisfy 0 <= 2d*w < 1")
    w0 = 1.0 - 2 * lattice.d * w1
    flat = np.full((wd, wd), 1.0 / wd)
    offsets = {}
    for axis in range(lattice.d):
        for sign in (1, -1):
            coord = [0] * lattice.d
            coord[axis] = sign % lattice.n
            offsets[lattice.block_index(tuple(coord))] = w1 * flat
    A = offsets
    return build_wegner_orbital(lattice, w0 * flat, A)


# ---- scalar diagnostics ------------------------------------------------------

def interaction_strength(profile: VarianceProfile) -> float:
    """lambda^2: average mass of the off-diagonal blocks (cached)."""
    if profile._lambda2 is None:
        wd = profile.lattice.block_volume
        total = sum(blk.sum() for off, blk in profile.blocks.items() if off != 0)
        profile._lambda2 = float(total) / wd
    return profile._lambda2


# ---- validation --------------------------------------------------------------

@dataclass
class ValidationReport:
    doubly_stochastic: bool
    row_sum_deviation: float
    symmetric: bool
    fullness: float
    flatness: float
    parity_checked: bool
    parity_ok: bool
    parity_violation: float
    lambda2: float
    interaction_ok: bool
    interaction_threshold: float
    irreducibility_ratio: float
    isotropy_range: tuple[float, float]
    generating_set_note: str = "not checked"

    def to_dict(self) -> dict:
        return {
            "doubly_stochastic": self.doubly_stochastic,
            "row_sum_deviation": self.row_sum_deviation,
            "symmetric": self.symmetric,
            "fullness": self.fullness,
            "flatness": self.flatness,
            "parity_checked": self.parity_checked,
            "parity_ok": self.parity_ok,
            "parity_violation": self.parity_violation,
            "lambda2": self.lambda2,
            "interaction_ok": self.interaction_ok,
            "interaction_threshold": self.interaction_threshold,
            "irreducibility_ratio": self.irreducibility_ratio,
            "isotropy_range": list(self.isotropy_range),
            "generating_set": self.generating_set_note,
        }


def _block_step_distribution(profile: VarianceProfile):
    """Centered block offsets and probabilities of the W^d[S] random walk."""
    lat = profile.lattice
    wd = lat.block_volume
    steps, probs = [], []
    for off, blk in profile.blocks.items():
        steps.append(lat.centered_block_coords(off))
        probs.append(blk.sum() / wd)
    return np.array(steps, dtype=float), np.array(probs)


def validate(profile: VarianceProfile, eps_inter: float = 0.1,
             p_samples: int = 64, check_parity: bool = True
             ) -> ValidationReport:
    """Check the defining conditions of the model class and report extremes.

    fullness: largest eps with S|_[a][a] >= eps * W^-d entrywise.
    flatness: smallest C with S_xy <= C W^-d and S_xy = 0 for |x-y| > C W.
    parity: (S|_[a][b])_{x,y} = (S|_[a][b])_{-y,-x} in centered coordinates
    (requires odd W).
    irreducibility: min over a p-grid of (1 - phi(p)) / (lambda^2 |p|^2).
    isotropy: eigenvalue range of the step covariance divided by lambda^2.
    """
    lat = profile.lattice
    wd = lat.block_volume
    dev = profile.row_sum_deviation()
    S = profile.assemble()
    symmetric = bool(np.array_equal(S, S.T))

    fullness = float(profile.block_at(0).min() * wd)
    max_entry_c = float(S.max() * wd)
    dist = lat.site_distance_matrix
    nz = S > 0
    reach_c = float(dist[nz].max()) / lat.W if nz.any() else 0.0
    flatness = max(max_entry_c, reach_c)

    parity_checked = False
    parity_ok = True
    parity_violation = 0.0
    if check_parity:
        if lat.W % 2 == 0:
            raise ProfileError("parity check requires odd W "
                               "(centered block coordinates must exist)")
        parity_checked = True
        for off, blk in profile.blocks.items():
            viol = float(np.abs(blk - blk[::-1, ::-1].T).max())
            parity_violation = max(parity_violation, viol)
        parity_ok = parity_violation <= 1e-12

    lam2 = interaction_strength(profile)
    thresh = float(lat.W ** (-lat.d + eps_inter))
    interaction_ok = lam2 >= thresh

    steps, probs = _block_step_distribution(profile)
    irre = np.inf
    if lam2 > 0:
        grid = np.linspace(-np.pi, np.pi, p_samples, endpoint=False)
        if lat.d == 1:
            ps = grid[:, None]
        else:
            ps = np.stack(np.meshgrid(grid, grid), axis=-1).reshape(-1, 2)
        ps = ps[np.abs(ps).sum(axis=1) > 1e-9]
        phase = ps @ steps.T
        one_minus_phi = ((1 - np.cos(phase)) * probs[None, :]).sum(axis=1)
        irre = float(np.min(one_minus_phi / (lam2 * (ps**2).sum(axis=1))))

    if lam2 > 0:
        sigma = np.einsum("k,ki,kj->ij", probs, steps, steps)
        evals = np.linalg.eigvalsh(sigma) / lam2
        iso = (float(evals.min()), float(evals.max()))
    else:
        iso = (0.0, 0.0)

    return ValidationReport(
        doubly_stochastic=bool(dev <= _ROWSUM_TOL and symmetric),
        row_sum_deviation=float(dev),
        symmetric=symmetric,
        fullness=fullness,
        flatness=float(flatness),
        parity_checked=parity_checked,
        parity_ok=parity_ok,
        parity_violation=parity_violation,
        lambda2=lam2,
        interaction_ok=bool(interaction_ok),
        interaction_threshold=thresh,
        irreducibility_ratio=float(irre) if np.isfinite(irre) else 0.0,
        isotropy_range=iso,
    )


# ---- flow ---------------------------------------------------------------------

def flow_profile(s0: VarianceProfile, t0: float, t: float) -> VarianceProfile:
    """S_t = S_{t0} + (t - t0) S_E. Row sums grow by (t - t0)."""
    if t < t0:
        raise ValueError(f"flow requires t >= t0, got t={t} < t0={t0}")
    lat = s0.lattice
    wd = lat.block_volume
    blocks = {off: blk.copy() for off, blk in s0.blocks.items()}
    diag = blocks.get(0, np.zeros((wd, wd))).copy()
    diag += (t - t0) / wd
    blocks[0] = diag
    return VarianceProfile(lat, blocks, builder=s0.builder + "+flow",
                           builder_params={**s0.builder_params,
                                           "t0": t0, "t": t})


def family_member(s_rbm: VarianceProfile, t_f: float, t: float, s: float
                  ) -> VarianceProfile:
    """Member t * [(t_f/s) S_RBM + (1 - t_f/s) S_E] of the family t*S_t.

    Requires t <= s <= t_f. Flowing the result from t to any t' <= t_f with
    :func:`flow_profile` stays inside the t'-family.
    """
    if not t <= s <= t_f:
        raise ValueError(f"need t <= s <= t_f, got t={t}, s={s}, t_f={t_f}")
    lat = s_rbm.lattice
    wd = lat.block_volume
    a = t * t_f / s
    b = t * (1 - t_f / s)
    blocks = {off: a * blk for off, blk in s_rbm.blocks.items()}
    diag = blocks.get(0, np.zeros((wd, wd))).copy()
    diag += b / wd
    blocks[0] = diag
    return VarianceProfile(lat, blocks, builder=s_rbm.builder + "+family",
                           builder_params={**s_rbm.builder_params,
                                           "t_f": t_f, "t": t, "s": s})


def decompose_core(s_t: VarianceProfile, c_ker: float):
    """Split S_t = S_ker + c_ker * S_E with S_ker entrywise nonnegative.

    Returns (S_ker profile, row_deficit) where row_deficit = 1 - rowsum(S_t)
    + c_ker is the killing rate of the random-walk representation.
    """
    lat = s_t.lattice
    wd = lat.block_volume
    admissible = float(s_t.block_at(0).min() * wd)
    if c_ker > admissible + 1e-15:
        raise ProfileError(
            f"c_ker={c_ker} too large; maximal admissible value is {admissible}")
    blocks = {off: blk.copy() for off, blk in s_t.blocks.items()}
    diag = blocks.get(0, np.zeros((wd, wd))).copy()
    diag -= c_ker / wd
    np.clip(diag, 0.0, None, out=diag)
    blocks[0] = diag
    ker = VarianceProfile(lat, blocks, builder=s_t.builder + "+core",
                          builder_params={"c_ker": c_ker})
    deficit = 1.0 - s_t.row_sum + c_ker
    return ker, deficit


# ---- serialization -------------------------------------------------------------

def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")


def _decode(text: str, wd: int) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(wd, wd).copy()


def profile_to_text(profile: VarianceProfile) -> str:
    """Serialize to a structured text document (bit-exact round trip)."""
    lat = profile.lattice
    doc = {
        "d": lat.d,
        "W": lat.W,
        "n": lat.n,
        "builder": profile.builder,
        "builder_params": profile.builder_params,
        "blocks": {str(off): _encode(blk)
                   for off, blk in sorted(profile.blocks.items())},
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def profile_from_text(text: str) -> VarianceProfile:
    doc = json.loads(text)
    lat = BlockLattice(d=int(doc["d"]), W=int(doc["W"]), n=int(doc["n"]))
    wd = lat.block_volume
    blocks = {int(off): _decode(blob, wd)
              for off, blob in doc["blocks"].items()}
    return VarianceProfile(lat, blocks, builder=doc.get("builder", "custom"),
                           builder_params=doc.get("builder_params", {}))
