import os
from dotenv import load_dotenv
import psutil

load_dotenv()

class Config:
    OUTPUT_DIR = os.getenv('RELAXO_OUT', 'results')
    OUTPUT_OVERRIDE = os.getenv('RELAXO_OUT')  # beats --out when set
    WORKERS = int(os.getenv('RELAXO_WORKERS', psutil.cpu_count(logical=False) or 1))
    LOG_LEVEL = os.getenv('RELAXO_LOG_LEVEL', 'INFO')
    MAX_MEMORY_PERCENT = 90
    SCHEMA_VERSION = 1
    DEFAULT_SEED = 42

    # Envelopes
    SENTINEL = 1.0e308
    HULL_TOL_FLOOR = 1e-9
    XI_GRID_1D = 2049
    XI_GRID_2D = 129
    DUAL_CHUNK = 512

    # Quadrature
    QUAD_ORDER_1D = 6
    QUAD_ORDER_2D = 4

    # Partition and cell construction
    X_PROBES = 5
    XI_PROBES = 33
    PARTITION_MAX_DEPTH = 12
    FREEZE_QUANTUM = 1e-9
    LAMINATE_RETRIES = 20
    BUDGET = {
        'excluded': 1 / 24,
        'oscillation': 1 / 9,
        'decomposition': 1 / 3,
        'fraction': 1 / 6,
        'proximity': 1 / 2,
    }

    # Minimization
    MULTISTART = 32
    SOLVER_MAX_ITER = 4000
    SOLVER_GTOL = 1e-12
    PLATEAU_RTOL = 1e-4
    TRUNCATION_RTOL = 1e-6
    TOL_TRANSFER = float(os.getenv('RELAXO_TOL_TRANSFER', 1e-3))
    SOLVER_SLACK = 2e-3
    MOLLIFIER_POINTS = 16
    SWAP_FLOOR = 1e-8  # swap errors below this are quadrature noise
    MANIA_STABILITY = 0.01

    # Plots
    SVG_HASHSALT = 'relaxo'
