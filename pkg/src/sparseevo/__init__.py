"""Sparse label-only adversarial attacks and their evaluation harness."""

from .image import (
    ImageTensor,
    PixelMask,
    AttackGoal,
    ShapeMismatchError,
    flatten_index,
    unflatten_index,
    compose,
    seed_vector,
    pixel_sparsity,
    l2_distance,
)
from .container import ContainerFormatError, load_image, save_image
from .oracle import (
    BudgetExhaustedError,
    QueryBudget,
    DecisionOracle,
    LinearToyOracle,
    Mlp2ToyOracle,
    CentroidOracle,
    oracle_from_spec,
)
from .wire import RemoteOracle, TransportError, WireProtocolError
from .evo import (
    EvoParams,
    AttackTrace,
    AttackResult,
    evaluate_fitness,
    initialise_population,
    run_sparse_evo,
)
from .baselines import (
    PointwiseParams,
    run_pointwise,
    SaltPepperSchedule,
    SaltPepperResult,
    InitializationFailedError,
    salt_pepper_init,
    ProjectionResult,
    l0_project,
)
from .harness import (
    EvalPair,
    AttackSpec,
    EvalRecord,
    run_cell,
    run_evaluation,
    summarize,
    derive_cell_seed,
)

__version__ = "0.1.0"
