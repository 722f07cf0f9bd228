"""Default tolerances and resolutions, in one place.

docs/config.md lists the same values with the config-file keys that override them.
"""

# matcore
TOL_UNITARY_PER_DIM = 1e-10  # ||U^dag U - I|| <= TOL_UNITARY_PER_DIM * dim
TOL_HERM_REL = 1e-10  # ||H - H^dag|| <= TOL_HERM_REL * ||H||

# spectral
CLUSTER_TOL = 1e-8  # rad; eigenangles closer than this share a branch
GAP_MIN = 1e-3  # minimum admissible |z_jk - 1|
TRACKING_MARGIN = 0.1  # best minus second-best trace overlap
SPLIT_TOL = 1e-4  # grouping threshold inside the Hermitian reduction

# adiabatic
FD_STEP_REL = 1e-4  # projector-derivative step, relative to the path length
SUBSTEPS = 8  # midpoint substeps per schedule interval
IDENTITY_TOL = 1e-9  # exact-algebra residual bound
CONSISTENCY_TOL = 1e-6  # W-recursion residual that signals a bug upstream

# map_models
SAMPLE_UNITARY_TOL = 1e-6
INTERP_ERROR_MAX = 1e-6
REUNITARIZE_WARN = 1e-6

# bench
VALUE_FLOOR = 1e-12
EXACT_CEILING = 1e-10  # every value below this -> verdict "exact"
N_LIST = tuple(16 * 2**k for k in range(9))  # 16 .. 4096
WINDOW_ORDER1 = 0.15
WINDOW_ORDER2 = 0.30
