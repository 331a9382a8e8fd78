"""Emulated persistent memory with twin-copy durable transactions."""

from .heap import (
    CorruptHeap,
    CrashModel,
    Heap,
    HeapError,
    HeapLayout,
    OutOfBounds,
    OutOfMemory,
    PmRef,
    State,
    crash_image,
    create_heap,
    write_image,
)
from .txn import (
    TxnError,
    TxnLog,
    begin_txn,
    end_txn,
    open_heap,
    pm_alloc,
    recover,
    set_root,
    store_u64,
    transaction,
    txn_store,
)

# Root table slots.
MODEL_ROOT = 0
DATA_ROOT = 1
DATA_LOADING_ROOT = 2
