"""Mode-pairing MDI QKD: session simulator, post-processing and finite-size key rates."""

from .channel import (
    ChannelParams,
    ClickTable,
    GroundTruth,
    RoundTable,
    Session,
    click_probabilities,
    phase_difference_trajectory,
    simulate_session,
)
from .decoy import (
    CountTable,
    KeyRateReport,
    analyze_counts,
    chernoff_bounds,
    direct_key_rate,
    estimate_ephase,
    estimate_M11_Z,
    key_length,
)
from .pairing import PairingStats, PairRecord, expected_pairs_heuristic, pair_clicks, pairing_rate
from .phase import (
    EstimationGroup,
    FrequencyTrack,
    compensation_phase,
    fit_frequency_track,
    log_likelihood,
    mle_delta_omega,
    pairwise_outcome_probability,
)
from .protocol import (
    ClickRecord,
    FrameLayout,
    IntensityLabel,
    ProtocolParams,
    Region,
    RoundSpec,
    binary_entropy,
    build_schedule,
)
from .sifting import assign_side_basis, map_keys, sift_pair, tally_counts

__version__ = "0.1.0"
