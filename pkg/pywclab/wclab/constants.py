"""
A set of constants used throughout the package.

"""

# Mesh
MIN_INTERIOR_NODES = 2
CELL_QUADRATURE_ORDER = 4

# Boundary edges of the unit square, in storage order of a BoundaryTrace.
# Each edge is (axis, side) with side -1 for x_k = 0 and +1 for x_k = 1.
EDGES = (("x1-", 1, -1), ("x1+", 1, 1), ("x2-", 2, -1), ("x2+", 2, 1))
EDGE_NAMES = tuple(name for name, _, _ in EDGES)

# Norm spaces accepted by grid.norm
NORM_SPACES = ("Lp", "Linf", "H1", "H1_0", "H2")

# Identity checks
IPP_IDENTITIES = ("IPP1", "IPP2", "IPP3", "IPP4", "IPP5", "IPP6", "IPPnew", "New1")
IPP_TOLERANCE = 1e-10

# Wave solver
DEFAULT_DT_FACTOR = 1.0 / 8.0
DEFAULT_CFL_FACTOR = 1.0

# Hyperbolic Carleman weights
DEFAULT_T_GAMMA = 1.6
DEFAULT_MU = 1.0
DEFAULT_EPS_TAU_H = 0.25
C0_MARGIN = 0.01
QUADRATURE_START_ORDER = 16
QUADRATURE_MAX_ORDER = 256
QUADRATURE_TOLERANCE = 1e-10
TAU_SWEEP_POINTS = 12
TAU_SWEEP_START = 4.0
TAU_SWEEP_STOP_TAU_H = 0.2
CARLEMAN_VARIANTS = ("boundary", "distributed", "t0")
CARLEMAN_DT_FACTOR = 0.5
CUTOFF_WIDTH_FRACTION = 0.5
JET_TOLERANCE = 1e-12

# Elliptic problem
CG_TOLERANCE = 1e-12
CG_ITERATION_FACTOR = 20
S_HALF_WIDTH = 3.0
DEFAULT_COLLAR_WIDTH = 0.2
DEFAULT_GAMMA0_INTERVAL = (0.3, 0.7)
DEFAULT_ELLIPTIC_RADIUS = 0.1
DEFAULT_ELLIPTIC_R0 = 0.25
CHORD_FRACTION = 0.9
S_PLATEAU = 2.0
EXTREMA_SUBDIVISION = 4
BOUNDARY_SAMPLES = 1000
REFINEMENT_SWEEPS = 3
REFINEMENT_PENALTY = 1e6

# FBI kernel
DEFAULT_KERNEL_ORDER = 2
DEFAULT_T_LOG = 16.0
KERNEL_TRUNCATION_LEVEL = 1e-18
KERNEL_QUADRATURE_ORDER = 200
DEFAULT_STRIP_WIDTH = 4.0
KERNEL_PANEL_ORDER = 20
KERNEL_TAIL_LEVEL = 1e-14
KERNEL_TAIL_MARGIN = 1.5
KERNEL_SCAN_EXTENT = 120.0
KERNEL_SCAN_POINTS = 2401
KERNEL_CHUNK = 2_000_000
SECTOR_SLOPE = 0.25
DECAY_SAMPLES = 41
FOURIER_WINDOW = 4.0
FOURIER_STEP = 0.05
FOURIER_TOLERANCE = 1e-6
CLOSED_FORM_TOLERANCE = 1e-10
HOLOMORPHY_STEP = 1e-4
APPROX_IDENTITY_MESH = 4
APPROX_IDENTITY_DT = 0.05
APPROX_IDENTITY_STRIDE = 4
MEASUREMENT_FACTORS = (1.0, 2.0, 4.0, 8.0, 16.0)
SMOOTHSTEP_SLOPE = 1.875
SMOOTHSTEP_CURVATURE = 5.773502691896258

# Inverse problem
DEFAULT_ALPHA0 = 1.0
DEFAULT_M_CAP = 1.0
ARMIJO_MAX_HALVINGS = 40
ARMIJO_SLOPE = 1e-4
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_GRADIENT_TOLERANCE = 1e-10
PERTURBATION_MAX_FREQUENCY = 4

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2

# Output files
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
OUTPUT_FORMATS = ("csv", "json")

# Configuration defaults per command. The type of each default fixes how a value is parsed:
# int, float, str, or a tuple for comma-separated lists. A None default accepts a float or
# "none".
SINE_MODE = "sin(pi*x1)*sin(pi*x2)"
COMMAND_DEFAULTS = {
    "solve": {
        "N": 16,
        "T": 1.0,
        "dt_factor": DEFAULT_DT_FACTOR,
        "q": "1",
        "y0": SINE_MODE,
        "y1": "0",
        "f": "0",
        "f_bdy": "0",
        "snapshot_stride": 1,
    },
    "ipp-check": {"n": (4, 8, 16), "trials": 200},
    "carleman-sweep": {
        "variant": "boundary",
        "n": (10, 20, 40),
        "tauh": (0.1,),
        "samples": 20,
        "T": DEFAULT_T_GAMMA,
    },
    "elliptic-check": {
        "n": (10, 20, 40, 80),
        "q": "1 + x1*x2",
        "g": "sin(pi*x1)*sin(2*pi*x2) + x1",
    },
    "elliptic-carleman": {
        "n": (10, 20, 40),
        "tau_h": 0.1,
        "mu": DEFAULT_MU,
        "gamma0": DEFAULT_GAMMA0_INTERVAL,
        "R": DEFAULT_ELLIPTIC_RADIUS,
        "R0": DEFAULT_ELLIPTIC_R0,
        "s_step_factor": 1.0,
        "q": "0",
    },
    "fbi-check": {"n_kernel": DEFAULT_KERNEL_ORDER, "lambda": (1.0, 4.0, 16.0)},
    "log-stability": {
        "N": 12,
        "T": DEFAULT_T_LOG,
        "dt_factor": DEFAULT_DT_FACTOR,
        "n_kernel": DEFAULT_KERNEL_ORDER,
        "alpha": None,
        "q": "1",
        "y0": SINE_MODE,
        "y1": "0",
        "gamma0": DEFAULT_GAMMA0_INTERVAL,
        "R": DEFAULT_ELLIPTIC_RADIUS,
        "R0": DEFAULT_ELLIPTIC_R0,
        "eps_tau_h": DEFAULT_EPS_TAU_H,
        "s_step": None,
        "factors": MEASUREMENT_FACTORS,
    },
    "stability-sweep": {
        "variant": "boundary",
        "n": (10, 20, 40),
        "T": DEFAULT_T_GAMMA,
        "dt_factor": DEFAULT_DT_FACTOR,
        "samples": 20,
        "m": DEFAULT_M_CAP,
        "alpha0": DEFAULT_ALPHA0,
        "K_cap": None,
        "family": "mixed",
        "scales": (1.0,),
        "collar_width": DEFAULT_COLLAR_WIDTH,
        "gamma0": DEFAULT_GAMMA0_INTERVAL,
        "n_kernel": DEFAULT_KERNEL_ORDER,
    },
    "reconstruct": {
        "N": 20,
        "T": DEFAULT_T_GAMMA,
        "dt_factor": DEFAULT_DT_FACTOR,
        "q_true": "1 + 0.5*sin(pi*x1)*sin(pi*x2)",
        "q_init": "1",
        "alpha0": DEFAULT_ALPHA0,
        "observation": ("x1+", "x2+"),
        "method": "lbfgs",
        "tolerance": DEFAULT_GRADIENT_TOLERANCE,
        "max_iterations": DEFAULT_MAX_ITERATIONS,
        "eps_reg": 0.0,
        "known_collar": 0.0,
        "gradient_check": 1,
    },
    "convergence": {
        "n": (10, 20, 40),
        "mode": "exact",
        "q_true": "1 + 0.5*sin(pi*x1)*sin(pi*x2)",
        "T": DEFAULT_T_GAMMA,
        "dt_factor": DEFAULT_DT_FACTOR,
        "method": "lbfgs",
        "tolerance": DEFAULT_GRADIENT_TOLERANCE,
        "max_iterations": DEFAULT_MAX_ITERATIONS,
        "eps_reg": 0.0,
    },
}

# Acceptance thresholds checked by the commands
REGULARITY_SPREAD = 1.5
CONVERGENCE_MIN_RATE = 0.9
RECONSTRUCTION_GAIN = 10.0
GRADIENT_CHECK_TOLERANCE = 1e-4
