from typing import Annotated, Any

import numpy as np
from pydantic import BaseModel, ConfigDict
from pydantic_core import core_schema


class _NDArray:
    """Pydantic adapter for read-only float64 numpy arrays."""

    @classmethod
    def __get_pydantic_core_schema__(cls, source_type: Any, handler):
        return core_schema.no_info_plain_validator_function(
            cls.validate,
            serialization=core_schema.plain_serializer_function_ser_schema(
                lambda a: a.tolist()
            ),
        )

    @classmethod
    def validate(cls, v):
        arr = np.array(v, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Array contains non-finite values")
        arr.setflags(write=False)
        return arr

    @classmethod
    def __get_pydantic_json_schema__(cls, _core_schema, handler):
        return {"type": "array", "items": {}}


Array = Annotated[np.ndarray, _NDArray]


class FrozenModel(BaseModel):
    """Immutable domain record."""

    model_config = ConfigDict(
        frozen=True,
        arbitrary_types_allowed=True,
        populate_by_name=True,
    )
