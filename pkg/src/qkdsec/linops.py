"""Dense complex linear algebra for small Hermitian operators.

Everything the security analysis manipulates (POVM elements, phase-error
operators, test observables, marginal states) lives in dimension of order
tens, so storage is dense complex throughout, even for protocols whose
data happens to be real.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERM_ATOL = 1e-9          # largest tolerated asymmetry ||H - H^dag||_max
MAX_DIM = 4096            # anything larger signals a misconfigured protocol


class DimensionError(ValueError):
    """Operator dimension exceeds the configured maximum or is inconsistent."""


class EigenSolverError(RuntimeError):
    """The eigensolver failed to converge."""


@dataclass(frozen=True)
class Ket:
    """Normalized state vector with an explicit dimension tag."""

    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amp.size < 1:
            raise DimensionError("ket needs dim >= 1")
        norm = np.linalg.norm(amp)
        if norm == 0:
            raise ValueError("cannot normalize the zero vector")
        amp = amp / norm
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    def inner(self, other: "Ket") -> complex:
        """<self|other>."""
        if self.dim != other.dim:
            raise DimensionError("inner product of kets with different dims")
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def projector(self) -> "HermitianOperator":
        return HermitianOperator(np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True)
class HermitianOperator:
    """Dense complex Hermitian matrix.

    Construction symmetrizes (H + H^dag)/2 and rejects inputs whose
    asymmetry exceeds ``HERM_ATOL`` relative to the matrix scale, so the
    eigensolvers downstream can rely on exact Hermiticity.
    """

    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {m.shape}")
        if m.shape[0] < 1 or m.shape[0] > MAX_DIM:
            raise DimensionError(f"dim {m.shape[0]} outside [1, {MAX_DIM}]")
        scale = max(1.0, float(np.abs(m).max()))
        asym = float(np.abs(m - m.conj().T).max())
        if asym > HERM_ATOL * scale:
            raise ValueError(f"matrix is not Hermitian (asymmetry {asym:.3e})")
        m = (m + m.conj().T) / 2.0
        m.setflags(write=False)
        object.__setattr__(self, "mat", m)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @property
    def is_real(self) -> bool:
        return bool(np.abs(self.mat.imag).max() <= 1e-14 * max(1.0, np.abs(self.mat.real).max()))

    def __add__(self, other: "HermitianOperator") -> "HermitianOperator":
        return HermitianOperator(self.mat + other.mat)

    def __sub__(self, other: "HermitianOperator") -> "HermitianOperator":
        return HermitianOperator(self.mat - other.mat)

    def __rmul__(self, scalar: float) -> "HermitianOperator":
        if abs(complex(scalar).imag) > 0:
            raise ValueError("only real scalars keep an operator Hermitian")
        return HermitianOperator(float(scalar) * self.mat)

    def trace(self) -> float:
        return float(np.real(np.trace(self.mat)))

    def expect(self, other: "HermitianOperator") -> float:
        """Tr{self @ other}; real for Hermitian arguments."""
        if self.dim != other.dim:
            raise DimensionError("trace product of operators with different dims")
        return float(np.real(np.sum(self.mat * other.mat.T)))


@dataclass(frozen=True)
class EigenSystem:
    """Ascending eigenvalues with an orthonormal eigenvector list."""

    eigenvalues: np.ndarray
    eigenvectors: list = field(repr=False)

    @property
    def min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max(self) -> float:
        return float(self.eigenvalues[-1])


def identity(dim: int) -> HermitianOperator:
    return HermitianOperator(np.eye(dim, dtype=complex))


def zero(dim: int) -> HermitianOperator:
    return HermitianOperator(np.zeros((dim, dim), dtype=complex))


def tensor(a: HermitianOperator, b: HermitianOperator) -> HermitianOperator:
    """Kronecker product a (x) b."""
    if a.dim * b.dim > MAX_DIM:
        raise DimensionError(f"tensor dim {a.dim * b.dim} exceeds {MAX_DIM}")
    return HermitianOperator(np.kron(a.mat, b.mat))


def tensor_kets(a: Ket, b: Ket) -> Ket:
    if a.dim * b.dim > MAX_DIM:
        raise DimensionError(f"tensor dim {a.dim * b.dim} exceeds {MAX_DIM}")
    return Ket(np.kron(a.amplitudes, b.amplitudes))


def eig_herm(h: HermitianOperator) -> EigenSystem:
    """Full eigendecomposition, eigenvalues ascending."""
    try:
        vals, vecs = np.linalg.eigh(h.mat)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails here
        raise EigenSolverError(f"eigh failed to converge: {exc}") from exc
    kets = [Ket(vecs[:, k]) for k in range(h.dim)]
    vals = np.asarray(vals, dtype=float)
    vals.setflags(write=False)
    return EigenSystem(eigenvalues=vals, eigenvectors=kets)


def min_eig(h: HermitianOperator) -> float:
    """Smallest eigenvalue; used to certify operator inequalities."""
    try:
        vals = np.linalg.eigvalsh(h.mat)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise EigenSolverError(f"eigvalsh failed to converge: {exc}") from exc
    return float(vals[0])


def min_eig_mat(m: np.ndarray) -> float:
    """min_eig on a raw ndarray, symmetrizing first (cheap guard)."""
    m = np.asarray(m)
    m = (m + m.conj().T) / 2.0
    return float(np.linalg.eigvalsh(m)[0])


def real_embedding(m: np.ndarray) -> np.ndarray:
    """Real-symmetric embedding [[Re, -Im], [Im, Re]] of a Hermitian matrix.

    The embedding is PSD exactly when the complex matrix is, which lets the
    real-symmetric SDP path handle complex Hermitian data.
    """
    m = np.asarray(m, dtype=complex)
    re, im = m.real, m.imag
    return np.block([[re, -im], [im, re]])
