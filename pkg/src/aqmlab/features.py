"""Canonical 8-feature state vector shared by the pool builder and the model.

The order is fixed; both sides index by name through this module so they can
never drift apart.
"""

STATE_FEATURES = (
    "queue_type",
    "burst_allowance",
    "drop_probability",
    "current_queue_delay",
    "accumulated_probability",
    "length_in_bytes",
    "total_drops_delta",
    "packet_length",
)

STATE_DIM = len(STATE_FEATURES)

FEATURE_INDEX = {name: i for i, name in enumerate(STATE_FEATURES)}

# Features fed through the multi-kernel conv path in the state encoder; the
# rest take the per-feature linear path.  Overridable via ModelConfig.
DEFAULT_CONV_FEATURES = ("current_queue_delay", "length_in_bytes", "total_drops_delta")

ACTION_ENQUEUE = 0
ACTION_DROP = 1
ACTION_MARK = 2
ACTION_COUNT = 3
