"""Linear attention with f(x) = a + b x: blocked O(N D^2) forward and analytic backward."""

from .backward import backward_causal, backward_full, cotangent_hat
from .errors import (
    DegenerateDenominator,
    InsufficientData,
    InvalidPhase,
    InvalidPlan,
    InvalidShape,
    LinAttnError,
    MeasurementNested,
    MissingForwardState,
    NonFiniteInput,
    ShapeMismatch,
)
from .forward import ForwardArtifacts, PrefixState, forward_causal, forward_full, prefix_advance
from .plan import (
    BlockPlan,
    Phase,
    WorkspaceReport,
    default_plan,
    enumerate_work,
    measure_workspace,
    normalize_qk,
)
from .reference import (
    augment_constant_feature,
    finite_diff_grads,
    quadratic_la,
    recurrent_la,
    softmax_attention,
)
from .tensor import (
    Fill,
    Gradients,
    HeadTensor,
    Layout,
    LinearKernelCoeffs,
    Mask,
    Shape,
    make_tensor,
    max_abs_diff,
    relayout,
)
