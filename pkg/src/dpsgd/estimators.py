"""scikit-learn style wrappers around :func:`run_training`.

``fit`` takes a :class:`StochasticProblem` rather than ``(X, y)``: the data
already lives on the nodes. Hyperparameters follow the usual contract
(constructor stores them verbatim, ``get_params``/``set_params`` work, fitted
attributes end in ``_``).
"""

from __future__ import annotations

import numbers

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_scalar

from .engine import AVERAGE_THEN_UPDATE, UPDATE_THEN_AVERAGE, StepSchedule, output_model, run_training
from .problems import StochasticProblem
from .topology import WeightMatrix, ring_weight_matrix

__all__ = ["DecentralizedSGD", "CentralizedSGD", "ElasticAveragingSGD"]


def _check_gamma(gamma):
    if gamma == "corollary2" or isinstance(gamma, StepSchedule):
        return gamma
    return check_scalar(gamma, "gamma", numbers.Real, min_val=0.0, include_boundaries="neither")


class _SGDBase(BaseEstimator):
    _algorithm = "dpsgd"

    def _validate(self, problem):
        if not isinstance(problem, StochasticProblem):
            raise TypeError(f"fit expects a StochasticProblem, got {type(problem).__name__}")
        check_scalar(self.n_iter, "n_iter", numbers.Integral, min_val=0)
        check_scalar(self.batch_size, "batch_size", numbers.Integral, min_val=1)
        check_scalar(self.record_every, "record_every", numbers.Integral, min_val=1)
        _check_gamma(self.gamma)

    def _run_kwargs(self, problem) -> dict:
        return {}

    def fit(self, problem: StochasticProblem, y=None):
        """Train on ``problem``; ``y`` is ignored."""
        self._validate(problem)
        res = run_training(
            problem,
            algorithm=self._algorithm,
            n_iter=self.n_iter,
            gamma=self.gamma,
            seed=self.seed,
            batch_size=self.batch_size,
            record_every=self.record_every,
            n_jobs=self.n_jobs,
            **self._run_kwargs(problem),
        )
        self.trace_ = res.trace
        self.state_ = res.state
        self.metadata_ = res.metadata
        self.n_iter_ = self.n_iter
        self.coef_ = output_model(res.state, self._output_mode())
        return self

    def _output_mode(self):
        return "average"

    def score(self, problem: StochasticProblem, y=None) -> float:
        """Negative global loss at ``coef_`` (higher is better)."""
        check_is_fitted(self, "coef_")
        return -float(problem.loss(self.coef_))


class DecentralizedSGD(_SGDBase):
    """D-PSGD over a mixing matrix (ring by default).

    Parameters
    ----------
    topology : WeightMatrix or None
        ``None`` builds a ring on ``problem.node_count`` nodes.
    output : "average" or int
        Returned model: column average or one node's iterate.
    """

    _algorithm = "dpsgd"

    def __init__(self, topology=None, n_iter=1000, gamma="corollary2", seed=0, order=AVERAGE_THEN_UPDATE,
                 overlap=False, momentum=0.0, batch_size=1, record_every=1, n_jobs=None, output="average"):
        self.topology = topology
        self.n_iter = n_iter
        self.gamma = gamma
        self.seed = seed
        self.order = order
        self.overlap = overlap
        self.momentum = momentum
        self.batch_size = batch_size
        self.record_every = record_every
        self.n_jobs = n_jobs
        self.output = output

    def _validate(self, problem):
        super()._validate(problem)
        if self.order not in (AVERAGE_THEN_UPDATE, UPDATE_THEN_AVERAGE):
            raise ValueError(f"order must be {AVERAGE_THEN_UPDATE!r} or {UPDATE_THEN_AVERAGE!r}")
        if self.topology is not None and not isinstance(self.topology, WeightMatrix):
            raise TypeError("topology must be a WeightMatrix or None")
        check_scalar(self.momentum, "momentum", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="left")

    def _run_kwargs(self, problem):
        W = self.topology if self.topology is not None else ring_weight_matrix(problem.node_count)
        return dict(W=W, order=self.order, overlap=self.overlap, momentum=self.momentum)

    def _output_mode(self):
        return self.output


class CentralizedSGD(_SGDBase):
    """Synchronous SGD on the averaged gradient.

    ``backend`` only changes the cost model: "parameter-server" or "allreduce".
    """

    def __init__(self, backend="parameter-server", n_iter=1000, gamma="corollary2", seed=0,
                 batch_size=1, record_every=1, n_jobs=None):
        self.backend = backend
        self.n_iter = n_iter
        self.gamma = gamma
        self.seed = seed
        self.batch_size = batch_size
        self.record_every = record_every
        self.n_jobs = n_jobs

    @property
    def _algorithm(self):
        if self.backend not in ("parameter-server", "allreduce"):
            raise ValueError(f"backend must be 'parameter-server' or 'allreduce', got {self.backend!r}")
        return "cpsgd" if self.backend == "parameter-server" else "allreduce"


class ElasticAveragingSGD(_SGDBase):
    """EAMSGD with centre moving rate ``beta`` and period ``tau``.

    ``output="center"`` returns the centre variable instead of the average.
    """

    _algorithm = "eamsgd"

    def __init__(self, beta=0.9, tau=1, momentum=0.9, n_iter=1000, gamma=0.1, seed=0,
                 batch_size=1, record_every=1, n_jobs=None, output="average"):
        self.beta = beta
        self.tau = tau
        self.momentum = momentum
        self.n_iter = n_iter
        self.gamma = gamma
        self.seed = seed
        self.batch_size = batch_size
        self.record_every = record_every
        self.n_jobs = n_jobs
        self.output = output

    def _validate(self, problem):
        super()._validate(problem)
        check_scalar(self.beta, "beta", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="right")
        check_scalar(self.tau, "tau", numbers.Integral, min_val=1)
        check_scalar(self.momentum, "momentum", numbers.Real, min_val=0.0, max_val=1.0, include_boundaries="left")

    def _run_kwargs(self, problem):
        return dict(beta=self.beta, tau=self.tau, momentum=self.momentum)

    def _output_mode(self):
        return self.output
