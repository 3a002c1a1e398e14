from dataclasses import dataclass, fields
from typing import Any, Dict

from dbt_common.dataclass_schema import ValidationError, dbtClassMixin

from nerp.nerp_exceptions import InvalidConfig


@dataclass
class NerpConfigBase(dbtClassMixin):
    """
    This base class gives every NeRP config a JSON round trip (through dbtClassMixin)
    and a single place where invariants are enforced.
    """

    def __post_init__(self) -> None:
        self.check()

    def check(self) -> None:
        pass

    def require(self, condition: bool, message: str) -> None:
        if not condition:
            raise InvalidConfig(f"{type(self).__name__}: {message}")

    @classmethod
    def from_partial(cls, overrides: Dict[str, Any]):
        # missing keys fall back to field defaults
        unknown = sorted(set(overrides) - {f.name for f in fields(cls)})
        if unknown:
            raise InvalidConfig(f"{cls.__name__}: unknown fields {', '.join(unknown)}")
        try:
            return cls.from_dict({**cls().to_dict(), **overrides})
        except (ValidationError, ValueError) as exc:
            raise InvalidConfig(f"{cls.__name__}: {exc}") from exc
