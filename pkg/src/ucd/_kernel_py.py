"""Pure-numpy fallback for the similarity kernel.

Each output row is an independent matrix-vector product, so the result is
bit-identical for every chunking of the rows (the compiled kernel has the
same property by sequential accumulation). Slower than the compiled kernel
on large blocks because the contrast matrix is re-read per row.
"""

import numpy as np


def unit_rows_product(anchors, contrast, out, row_start, row_stop):
    for i in range(row_start, row_stop):
        np.dot(contrast, anchors[i], out=out[i])
