"""Probabilistic fair ordering of noisy client timestamps."""

__version__ = "0.1.0"

from .clock_stats import (
    ClockModel,
    DifferencePdf,
    EmpiricalOffset,
    GaussianOffset,
    difference_pdf,
    offset_quantile,
    preceding_prob,
    preceding_prob_gaussian,
    tail_probability,
)
from .errors import (
    CycleError,
    InvalidDistributionError,
    OrderError,
    ProtocolError,
    TieError,
    WatermarkNotEstablished,
)
from .fair_order import (
    Batch,
    Message,
    SequencedOutput,
    Tournament,
    break_cycles,
    build_tournament,
    detect_cycle,
    form_batches,
    sequence,
    topological_order,
    tournament_from_probabilities,
)
from .online import (
    ClockTick,
    EmittedBatch,
    Heartbeat,
    MessageArrival,
    OnlineConfig,
    OnlineSequencer,
    batch_emission_time,
    conservative_watermark,
    safe_time,
)
