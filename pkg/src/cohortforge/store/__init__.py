from .container import (Container, ContainerWriter, append_container, read_container,
                        write_container)
from .csvio import CsvTypeError, load_csv, write_csv
from .table import (ColumnSchema, DType, PartitionedTable, Table, concat_tables, drop_null_rows,
                    filter_rows, project, schema_from_spec)

__all__ = [
    "ColumnSchema", "Container", "ContainerWriter", "CsvTypeError", "DType", "PartitionedTable",
    "Table", "append_container", "concat_tables", "drop_null_rows", "filter_rows", "load_csv",
    "project", "read_container", "schema_from_spec", "write_container", "write_csv",
]
