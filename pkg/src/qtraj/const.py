APP_NAME = 'qtraj'

# Validation tolerances for 2x2 states.
TOL_HERMITIAN = 1e-12
TOL_TRACE = 1e-9
TOL_POSITIVE = 1e-9
TOL_ROUNDTRIP = 1e-12
TOL_BALL = 1e-9

# Branch probabilities at or below this are never selected.
EPS_BRANCH = 1e-14
# Replaces the strict Tr[J] > 0 indicator of the jump update.
EPS_RATE = 1e-12

# Samples per vectorized chunk; fixed so results never depend on --threads.
CHUNK_SIZE = 256

# Integrators repair states within max(TOL_POSITIVE, REPAIR_FACTOR * dt).
REPAIR_FACTOR = 100.0

# Upper limits on Poisson field sizes and dominating intensities.
MAX_FIELD_AREA = 1e7
MAX_INTENSITY = 1e6
