"""Matrix completion by fully asynchronous nomadic-column SGD, with
serial SGD, DSGD, CCD++, and ALS baselines, data tooling, and a
benchmark harness."""

from .core import (
    DimensionMismatchError,
    FactorMatrix,
    HyperParams,
    NormalEquation,
    Partition,
    RatingEntry,
    ShardedRatings,
    objective,
    objective_gradient,
    partition_rows,
    predict,
    step_size,
)
from .kernels import (
    ResidualMatrix,
    SingularSystemError,
    als_solve_row,
    build_normal_equation,
    ccd_coordinate_update,
    ccdpp_epoch,
    sgd_update_pair,
)
from .data import (
    DataFormatError,
    DatasetMeta,
    Entries,
    SyntheticSpec,
    generate_synthetic,
    parse_text,
    read_binary,
    shard,
    split_train_test,
    write_binary,
)
from .evaluate import ConvergenceLog, read_csv, test_rmse, throughput, write_csv
from .transport import (
    ColumnParcel,
    InProcessTransport,
    ParcelBatch,
    SocketMesh,
    TransportError,
    WireFormatError,
    decode_batch,
    encode_batch,
    flush_policy,
)
from .nomad import (
    EngineError,
    NomadEngine,
    RunControl,
    WorkerState,
    audit_trace,
    checkpoint,
    init_factors,
    run_nomad,
    select_recipient,
)
from .hybrid import HybridEngine, run_hybrid
from .baselines import (
    BoldDriver,
    StratumPlan,
    bold_driver_step,
    run_als,
    run_ccdpp,
    run_dsgd,
    run_serial_sgd,
)

__version__ = "0.1.0"
