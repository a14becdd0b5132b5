"""
Simulation Service

Monte Carlo sampling of measurement trajectories and the exact oracles used to
check the bounds: the exact CGF, the exact law of the observed sum and its tail
probabilities, and the finitely-correlated-state side of the same tails.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from functools import reduce
from typing import Iterator, Optional

import numpy as np
from numpy import ndarray
from scipy import linalg, stats

from qhmm.config import Settings
from qhmm.core.operators import DensityOperator, partial_trace, unvec, vec
from qhmm.models.instrument import FcsModel, Instrument, Outcome
from qhmm.models.reports import CltReport, SumDistribution, TailDirection, Trajectory
from qhmm.services.cgf_service import CgfProfile
from qhmm.services.variance_service import VarianceService, ZeroVarianceError

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Raised when a trajectory reaches a state with numerically zero outcome probability."""
    pass


class OracleCapExceededError(ValueError):
    """Raised when an exact oracle would exceed the configured size cap."""
    pass


def trial_generator(seed: int, trial: int) -> np.random.Generator:
    """Independent stream for one trajectory, derived from (seed, trial)."""
    return np.random.default_rng(np.random.SeedSequence([seed, trial]))


class SimulationService:
    """
    Service for trajectory sampling and exact oracles.

    Features:
    - Vectorized trajectory sampling, one RNG stream per trajectory
    - Exact CGF log Tr Lambda_theta^n(rho) with per-step rescaling
    - Exact sum distribution (lattice-array or rounded-key dynamic programming)
    - Exact tails, FCS-side tails, scaled-CGF and CLT checks
    """

    def __init__(self, settings: Settings, variance_service: Optional[VarianceService] = None):
        self.settings = settings
        self.variance_service = variance_service or VarianceService(settings)
        self.pf_service = self.variance_service.pf_service
        self.instruments = self.pf_service.instruments

    # Trajectories

    def _simulate_chunk(
        self,
        instr: Instrument,
        rho: ndarray,
        n: int,
        seed: int,
        start: int,
        stop: int,
        record_states: bool,
    ) -> tuple[ndarray, Optional[list[ndarray]]]:
        """Outcome indices of trials [start, stop), shape (stop - start, n)."""
        d = instr.dim
        count = stop - start
        outcomes = instr.outcomes
        kraus = [
            np.stack(o.kraus) if o.kraus else np.zeros((0, d, d), dtype=complex) for o in outcomes
        ]
        effects = np.stack([np.einsum("kji,kjl->il", k.conj(), k) for k in kraus])
        uniforms = np.stack([trial_generator(seed, t).random(n) for t in range(start, stop)])

        sigma = np.broadcast_to(np.asarray(rho, dtype=complex), (count, d, d)).copy()
        choices = np.empty((count, n), dtype=np.int64)
        states = [] if record_states else None
        for step in range(n):
            probabilities = np.clip(np.einsum("wij,mji->mw", effects, sigma).real, 0.0, None)
            totals = probabilities.sum(axis=1)
            stuck = np.flatnonzero(totals < self.settings.zero_probability_tol)
            if stuck.size:
                raise SimulationError(
                    f"Trajectory {start + int(stuck[0])} reached a state with zero total "
                    f"outcome probability at step {step}"
                )
            cumulative = np.cumsum(probabilities, axis=1)
            cumulative /= cumulative[:, -1:]
            choice = (uniforms[:, step, None] > cumulative).sum(axis=1)

            updated = np.empty_like(sigma)
            for index, operators in enumerate(kraus):
                mask = choice == index
                if not mask.any():
                    continue
                image = np.einsum("kij,mjl,knl->min", operators, sigma[mask], operators.conj())
                updated[mask] = image / probabilities[mask, index][:, None, None]
            sigma = updated
            choices[:, step] = choice
            if record_states:
                states.append(sigma.copy())
        return choices, states

    def _chunks(self, trials: int) -> list[tuple[int, int]]:
        size = self.settings.simulation_chunk_size
        return [(start, min(start + size, trials)) for start in range(0, trials, size)]

    def _run_chunks(
        self, instr: Instrument, rho: DensityOperator, n: int, trials: int, seed: int, record_states: bool
    ) -> Iterator[tuple[int, ndarray, Optional[list[ndarray]]]]:
        if n < 1 or trials < 1:
            raise ValueError("n and trials must be at least 1")
        self.instruments.require_valid(instr)
        chunks = self._chunks(trials)

        def job(bounds: tuple[int, int]):
            start, stop = bounds
            choices, states = self._simulate_chunk(instr, rho.matrix, n, seed, start, stop, record_states)
            return start, choices, states

        with ThreadPoolExecutor(max_workers=self.settings.threads) as executor:
            yield from executor.map(job, chunks)

    def sample_trajectories(
        self,
        instr: Instrument,
        rho: DensityOperator,
        n: int,
        trials: int,
        seed: int,
        record_states: bool = False,
    ) -> Iterator[Trajectory]:
        """
        Stream trajectories of the exact process law.

        Trial i is driven by its own stream derived from (seed, i), so results do
        not depend on chunking or thread count.

        Raises:
            SimulationError: If a state with zero total outcome probability is reached
        """
        labels = instr.labels
        values = instr.values
        for start, choices, states in self._run_chunks(instr, rho, n, trials, seed, record_states):
            for row, choice in enumerate(choices):
                yield Trajectory(
                    trial=start + row,
                    seed=seed,
                    outcomes=[labels[c] for c in choice],
                    values=[float(v) for v in values[choice]],
                    states=[step[row] for step in states] if states is not None else None,
                )

    def sample_means(self, instr: Instrument, rho: DensityOperator, n: int, trials: int, seed: int) -> ndarray:
        """Sample means X^n of `trials` trajectories, same streams as sample_trajectories."""
        values = instr.values
        means = np.empty(trials)
        for start, choices, _ in self._run_chunks(instr, rho, n, trials, seed, False):
            means[start:start + len(choices)] = values[choices].mean(axis=1)
        return means

    def _profile(self, instr: Instrument, rho: DensityOperator) -> CgfProfile:
        return CgfProfile(instr, self.settings, state=rho, pf_service=self.pf_service)

    def empirical_mean_check(
        self, instr: Instrument, rho: DensityOperator, n: int, trials: int, seed: int
    ) -> dict:
        """
        Empirical mean of X^n against phi'(0).

        Returns:
            Dictionary with the empirical mean, phi'(0), the standard error
            sqrt(phi''(0) / (n trials)) and the z-score
        """
        means = self.sample_means(instr, rho, n, trials, seed)
        expected = self._profile(instr, rho).phi_prime(0.0)
        variance = max(self.variance_service.asymptotic_variance(instr, require_primitive=False), 0.0)
        standard_error = math.sqrt(variance / (n * trials))
        empirical = float(means.mean())
        return {
            "mean": empirical,
            "expected": expected,
            "standard_error": standard_error,
            "z_score": (empirical - expected) / standard_error if standard_error > 0 else 0.0,
        }

    def monte_carlo_tail(
        self,
        instr: Instrument,
        rho: DensityOperator,
        n: int,
        a: float,
        direction=TailDirection.UPPER,
        trials: int = 10000,
        seed: int = 0,
    ) -> float:
        """Fraction of trajectories with X^n >= a (resp. <= a)."""
        direction = TailDirection(direction)
        means = self.sample_means(instr, rho, n, trials, seed)
        tol = 1e-12 * max(1.0, abs(a))
        if direction is TailDirection.UPPER:
            hits = means >= a - tol
        else:
            hits = means <= a + tol
        return float(np.mean(hits))

    def clt_check(
        self,
        instr: Instrument,
        rho: DensityOperator,
        n: int,
        trials: int,
        seed: int,
        means: Optional[ndarray] = None,
    ) -> CltReport:
        """
        Kolmogorov-Smirnov distance of sqrt(n)(X^n - phi'(0)) to N(0, phi''(0)).

        Args:
            means: Sample means already drawn with (n, trials, seed); sampled here if absent

        Raises:
            ZeroVarianceError: If phi''(0) vanishes
            ValueError: If means does not hold one value per trial
        """
        if means is not None and np.shape(means) != (trials,):
            raise ValueError(f"Expected {trials} sample means, got shape {np.shape(means)}")
        variance = self.variance_service.asymptotic_variance(instr, require_primitive=False)
        if variance <= self.settings.strict_convexity_tol:
            raise ZeroVarianceError(f"Asymptotic variance {variance:.3e} is zero; no Gaussian limit")
        mean = self._profile(instr, rho).phi_prime(0.0)
        if means is None:
            means = self.sample_means(instr, rho, n, trials, seed)
        means = np.asarray(means, dtype=float)
        normalized = math.sqrt(n) * (means - mean)
        result = stats.kstest(normalized, "norm", args=(0.0, math.sqrt(variance)))
        logger.info(f"CLT check n={n} trials={trials}: KS={result.statistic:.5f}")
        return CltReport(
            n=n,
            trials=trials,
            seed=seed,
            mean=mean,
            variance=variance,
            ks_statistic=float(result.statistic),
            p_value=float(result.pvalue),
        )

    # Exact oracles

    def exact_cgf(self, instr: Instrument, rho: DensityOperator, theta: float, n: int) -> float:
        """log Tr Lambda_theta^n(rho), rescaling the trace to 1 after every application."""
        matrix = self.instruments.tilted_map(instr, theta).matrix
        trace_row = vec(np.eye(instr.dim))
        vector = vec(rho.matrix).astype(complex)
        log_total = 0.0
        for _ in range(n):
            vector = matrix @ vector
            trace = float(np.dot(trace_row, vector).real)
            if trace <= 0:
                raise SimulationError("Tilted map produced a non-positive trace")
            vector /= trace
            log_total += math.log(trace)
        return log_total

    def scaled_cgf_check(self, instr: Instrument, rho: DensityOperator, delta: float, n: int) -> float:
        """exact_cgf(delta / sqrt(n), n) - delta sqrt(n) phi'(0), which tends to (delta^2/2) phi''(0)."""
        if delta == 0:
            return 0.0
        mean = self._profile(instr, rho).phi_prime(0.0)
        return self.exact_cgf(instr, rho, delta / math.sqrt(n), n) - delta * math.sqrt(n) * mean

    @staticmethod
    def lattice(values: ndarray) -> Optional[tuple[float, float, ndarray]]:
        """(base, step, integer offsets) when all values lie on base + step * Z, else None."""
        values = np.asarray(values, dtype=float)
        distinct = np.unique(values)
        base = float(distinct[0])
        if distinct.size == 1:
            return base, 1.0, np.zeros(values.size, dtype=np.int64)
        smallest = float(distinct[1] - base)
        for divisor in range(1, 13):
            step = smallest / divisor
            ratios = (values - base) / step
            offsets = np.rint(ratios)
            if np.all(np.abs(ratios - offsets) <= 1e-9 * max(1.0, float(np.max(ratios)))):
                return base, step, offsets.astype(np.int64)
        return None

    def _check_cap(self, instr: Instrument, n: int, atoms: int) -> None:
        entries = float(atoms) * instr.dim**2
        if entries > self.settings.oracle_max_entries:
            raise OracleCapExceededError(
                f"Exact sum distribution at n={n} needs about {entries:.3g} entries "
                f"(cap {self.settings.oracle_max_entries:.3g})"
            )

    def exact_sum_distribution(self, instr: Instrument, rho: DensityOperator, n: int) -> SumDistribution:
        """
        Exact law of the sum of n outcome values jointly with the hidden state.

        Atoms satisfy Pr{n X^n = s} = Tr rho_s via rho'_{s + x} += C_omega(rho_s).

        Raises:
            OracleCapExceededError: If atom count times d^2 exceeds oracle_max_entries
        """
        if n < 0:
            raise ValueError("n must be nonnegative")
        self.instruments.require_valid(instr)
        d = instr.dim
        digits = self.settings.sum_key_digits
        maps = [o.superoperator(d).matrix for o in instr.outcomes]
        lattice = self.lattice(instr.values)

        if lattice is not None:
            base, step, offsets = lattice
            width = int(offsets.max())
            self._check_cap(instr, n, n * width + 1)
            grouped: dict[int, ndarray] = {}
            for offset, matrix in zip(offsets, maps):
                grouped[int(offset)] = grouped.get(int(offset), 0) + matrix
            table = np.zeros((n * width + 1, d * d), dtype=complex)
            table[0] = vec(rho.matrix)
            length = 1
            for _ in range(n):
                updated = np.zeros_like(table)
                for offset, matrix in grouped.items():
                    updated[offset:offset + length] += table[:length] @ matrix.T
                table = updated
                length += width
            atoms = {
                round(n * base + k * step, digits): unvec(table[k], d)
                for k in range(length)
                if np.any(table[k] != 0)
            }
        else:
            distinct = np.unique(instr.values).size
            bound = min(len(instr.outcomes) ** n, math.comb(n + distinct - 1, distinct - 1))
            self._check_cap(instr, n, bound)
            current = {0.0: vec(rho.matrix).astype(complex)}
            for _ in range(n):
                updated: dict[float, ndarray] = {}
                for total, vector in current.items():
                    for outcome, matrix in zip(instr.outcomes, maps):
                        key = round(total + outcome.value, digits)
                        image = matrix @ vector
                        updated[key] = updated[key] + image if key in updated else image
                current = updated
            atoms = {key: unvec(vector, d) for key, vector in current.items()}

        logger.debug(f"Sum distribution at n={n}: {len(atoms)} atoms (lattice={lattice is not None})")
        return SumDistribution(n=n, atoms=atoms)

    @staticmethod
    def distribution_tail(
        distribution: SumDistribution, a: float, direction=TailDirection.UPPER, strict: bool = False
    ) -> float:
        """Pr{X^n >= a} (resp. <= a) from atoms; strict uses > (resp. <)."""
        direction = TailDirection(direction)
        threshold = distribution.n * a
        tol = 1e-9 * max(1.0, abs(threshold))
        total = 0.0
        for s, probability in distribution.probabilities().items():
            if direction is TailDirection.UPPER:
                hit = s > threshold + tol if strict else s >= threshold - tol
            else:
                hit = s < threshold - tol if strict else s <= threshold + tol
            if hit:
                total += probability
        return total

    def exact_tail(
        self,
        instr: Instrument,
        rho: DensityOperator,
        n: int,
        a: float,
        direction=TailDirection.UPPER,
    ) -> float:
        """Pr{X^n >= a} (resp. <= a) from the exact sum distribution."""
        return self.distribution_tail(self.exact_sum_distribution(instr, rho, n), a, direction)

    def _eigenbasis_instrument(self, model: FcsModel) -> Instrument:
        """One outcome per eigenvector of A, C_j(rho) = Tr_out (|e_j><e_j| (x) I) Gamma(rho)."""
        eigenvalues, eigenvectors = np.linalg.eigh(model.observable.matrix)
        gamma_kraus = self.instruments.gamma_kraus(model)
        outcomes = []
        for j, value in enumerate(eigenvalues):
            bra = np.kron(eigenvectors[:, j].conj().reshape(1, -1), np.eye(model.hidden_dim))
            outcomes.append(Outcome(label=f"e{j}", value=float(value), kraus=[bra @ g for g in gamma_kraus]))
        return Instrument(dim=model.hidden_dim, outcomes=outcomes)

    def fcs_tail(
        self,
        model: FcsModel,
        rho: DensityOperator,
        n: int,
        a: float,
        dense: Optional[bool] = None,
    ) -> float:
        """
        Tr rho_n ({(1/n) sum_i A_i > a} (x) I) for the n-site state generated by Gamma.

        Builds rho_n explicitly when d_out^n d_H <= fcs_dense_max_dim, otherwise runs
        the block recursion in the eigenbasis of A.
        """
        total_dim = model.output_dim**n * model.hidden_dim
        if dense is None:
            dense = total_dim <= self.settings.fcs_dense_max_dim
        if not dense:
            distribution = self.exact_sum_distribution(self._eigenbasis_instrument(model), rho, n)
            return self.distribution_tail(distribution, a, TailDirection.UPPER, strict=True)

        gamma_kraus = self.instruments.gamma_kraus(model)
        state = np.asarray(rho.matrix, dtype=complex)
        sites = 1
        for _ in range(n):
            lifted = [np.kron(np.eye(sites), g) for g in gamma_kraus]
            state = sum(op @ state @ op.conj().T for op in lifted)
            sites *= model.output_dim
        reduced = partial_trace(state, (sites, model.hidden_dim), keep=0)

        eigenvalues, eigenvectors = linalg.eigh(model.observable.matrix)
        rotation = reduce(np.kron, [eigenvectors] * n)
        diagonal = np.real(np.einsum("ji,jk,ki->i", rotation.conj(), reduced, rotation))
        sums = reduce(lambda left, right: np.add.outer(left, right).reshape(-1), [eigenvalues] * n)
        tol = 1e-9 * max(1.0, abs(n * a))
        return float(diagonal[sums > n * a + tol].sum())
