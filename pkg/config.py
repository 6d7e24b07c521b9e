import os
from dotenv import load_dotenv


def load_configuration():
    load_dotenv()
    config = {
        'SEED': os.getenv('BTLTRACK_SEED') or None,
        'THREADS': os.getenv('BTLTRACK_THREADS') or None,
        'LOG_LEVEL': os.getenv('BTLTRACK_LOG_LEVEL', 'INFO').upper(),
        'OUT_DIRECTORY': os.getenv('BTLTRACK_OUT_DIR', 'results'),
    }

    if config['SEED'] is not None:
        try:
            config['SEED'] = int(config['SEED'])
        except ValueError:
            raise ValueError(f"BTLTRACK_SEED must be an integer, got {config['SEED']!r}.")
        if not 0 <= config['SEED'] < 2**64:
            raise ValueError("BTLTRACK_SEED must fit in an unsigned 64-bit integer.")

    if config['THREADS'] is not None:
        config['THREADS'] = max(1, int(config['THREADS']))
    else:
        config['THREADS'] = os.cpu_count() or 1

    return config


ARTIFACT_VERSION = "0.1.0"
RESULTS_SCHEMA_VERSION = 1
SUMMARY_FILE = "summary.tsv"
CURVES_FILE = "rmse_curves.tsv"
SWEEP_FILE = "sweep.tsv"
TABLE2_FILE = "table2.tsv"
STABILITY_FILE = "stability.tsv"
MANIFEST_FILE = "manifest.json"

# Covariance hygiene
EPS_PSD = 1e-9  # eigenvalue floor accepted on input covariances
EPS_REPAIR_REL = 1e-6  # times trace; below -this a matrix is not repairable
EPS_JITTER_REL = 1e-12  # times trace; added to the diagonal after a clamp
ROUNDOFF_ULPS = 64  # eigenvalues within this many ulps of the entries count as zero
SYMMETRY_TOL = 1e-10  # relative
MAX_CONDITION = 1e12  # innovation / fusion sums

# Models
OMEGA_EPSILON = 1e-8  # rad/s, below this the constant-velocity limit is used
MIN_RANGE_M = 1e-9

# Monte Carlo
DIVERGENCE_LIMIT_M = 1e6  # position error that marks a replica as diverged
MAX_DIVERGENCE_FRACTION = 0.05  # above this the CLI exits with code 3
RUNS_PER_TASK = 25  # replicas handed to a worker at once
