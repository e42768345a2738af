"""
Compute content digests of tensors and traces.
"""

from hashlib import md5

import json

import numpy as np

from uspsim.tensor import Tensor4


def tensor_digest(x: Tensor4) -> str:
    """
    MD5 of a tensor's dtype, shape and (row-major) raw bytes. Two tensors
    share a digest only if they are bit-identical.
    """
    md5_sum = md5()
    md5_sum.update(str(np.dtype(x.dtype)).encode("utf-8"))
    md5_sum.update(repr(tuple(x.shape)).encode("utf-8"))
    md5_sum.update(np.ascontiguousarray(x).tobytes())
    return md5_sum.hexdigest()


def trace_hash(trace: dict) -> str:
    """
    Compute a hash of the contents of a trace.

    This hash is the MD5 sum of the concatenated (binary) MD5 checksums of
    each top-level field name and its canonical (sorted-key) JSON encoding,
    in alphabetical order. Any ``digest`` field is ignored so the hash may
    be stored in the trace itself.
    """
    md5_sum = md5()
    for field, value in sorted(trace.items()):
        if field == "digest":
            continue
        md5_sum.update(md5(field.encode("utf-8")).digest())
        md5_sum.update(md5(json.dumps(value, sort_keys=True).encode("utf-8")).digest())
    return md5_sum.hexdigest()
