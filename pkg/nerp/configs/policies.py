from dbt_common.dataclass_schema import StrEnum


class ShapeKind(StrEnum):
    Cylinder = "cylinder"
    Box = "box"


class EdgeTopology(StrEnum):
    Complete = "complete"
    KNN = "knn"


class DropoutMode(StrEnum):
    Train = "train"
    Eval = "eval"
    Stochastic = "stochastic-inference"


class MoveKind(StrEnum):
    ToGoal = "to_goal"
    ToStorage = "to_storage"


class TraceStatus(StrEnum):
    Success = "success"
    BudgetExhausted = "budget_exhausted"
    OutOfPlanningBudget = "out_of_planning_budget"
    IterationCap = "iteration_cap"
    PlannerConverged = "planner_converged"
    NoFeasibleDelta = "no_feasible_delta"


class HorizonMode(StrEnum):
    Simulation = "sim"
    Constrained = "constrained"


class ErrorReduction(StrEnum):
    Sum = "sum"
    Max = "max"


class AblationVariant(StrEnum):
    Full = "full"
    NoDropout = "no_dropout"
    NoObjectSelection = "no_OS"
    NoGoalSatisfaction = "no_GS"


class Method(StrEnum):
    Nerp = "nerp"
    Expert = "expert"
    ClassicalHeuristic = "classical_heuristic"
    ClassicalRandom = "classical_random"


class Split(StrEnum):
    Train = "train"
    Val = "val"
    Test = "test"
