from .log_entry import (  # noqa: F401
    OP_COMMITVER, OP_DEL, OP_PUT, LogEntry, decode_scan, encode_log_entry,
)
from .index import ShardIndex  # noqa: F401
from .segments import (  # noqa: F401
    COMMITTED, FREE, OWNER_CLEAN, OWNER_CONTROL, OWNER_WORKER, USED, USING,
    SegmentTable,
)
from .server import (  # noqa: F401
    CommittedSafetyViolation, Result, SaturationError, Server, ServerConfig,
)
