import json
import os
from typing import Any, Dict, Iterable, List, Sequence

import agate
from dbt_common.clients.agate_helper import table_from_data_flat


def rows_table(rows: Sequence[Dict[str, Any]], columns: Iterable[str]) -> agate.Table:
    """Flat agate table; nested values are JSON-encoded by the helper."""
    return table_from_data_flat(list(rows), list(columns))


def write_csv(rows: Sequence[Dict[str, Any]], columns: Sequence[str], path: str) -> agate.Table:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    table = rows_table(rows, columns)
    table.to_csv(path)
    return table


def read_csv(path: str) -> List[Dict[str, Any]]:
    table = agate.Table.from_csv(path)
    return [dict(zip(table.column_names, row.values())) for row in table.rows]


def write_json(payload: Dict[str, Any], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2, default=_default)


def _default(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "item"):
        return value.item()
    return str(value)
