from nerp.configs.base import NerpConfigBase
from nerp.configs.policies import (
    AblationVariant,
    DropoutMode,
    EdgeTopology,
    ErrorReduction,
    HorizonMode,
    Method,
    MoveKind,
    ShapeKind,
    Split,
    TraceStatus,
)
