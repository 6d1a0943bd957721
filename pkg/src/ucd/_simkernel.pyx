# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-block kernel for the pairwise similarity matrix.

Inputs are unit-normalized feature rows; the kernel fills ``out`` rows
[row_start, row_stop) with dot products against every contrast row. Each
dot product runs four independent accumulator chains over raw pointers,
folded in a fixed order, so the feature axis stays in SIMD registers; the
computation per entry is identical for any chunking, which keeps results
bit-stable across chunk sizes.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _dot(const double* a, const double* b, Py_ssize_t dim) noexcept nogil:
    cdef Py_ssize_t main = dim - (dim & 7)
    cdef Py_ssize_t d
    cdef double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0
    cdef double acc4 = 0.0, acc5 = 0.0, acc6 = 0.0, acc7 = 0.0
    cdef double acc
    for d in range(0, main, 8):
        acc0 += a[d] * b[d]
        acc1 += a[d + 1] * b[d + 1]
        acc2 += a[d + 2] * b[d + 2]
        acc3 += a[d + 3] * b[d + 3]
        acc4 += a[d + 4] * b[d + 4]
        acc5 += a[d + 5] * b[d + 5]
        acc6 += a[d + 6] * b[d + 6]
        acc7 += a[d + 7] * b[d + 7]
    acc = ((acc0 + acc1) + (acc2 + acc3)) + ((acc4 + acc5) + (acc6 + acc7))
    for d in range(main, dim):
        acc += a[d] * b[d]
    return acc


cpdef void unit_rows_product(double[:, ::1] anchors, double[:, ::1] contrast,
                             double[:, ::1] out, Py_ssize_t row_start,
                             Py_ssize_t row_stop) noexcept nogil:
    cdef Py_ssize_t n_contrast = contrast.shape[0]
    cdef Py_ssize_t dim = contrast.shape[1]
    cdef const double* anchor_base = &anchors[0, 0]
    cdef const double* contrast_base = &contrast[0, 0]
    cdef double* out_base = &out[0, 0]
    cdef Py_ssize_t out_stride = out.shape[1]
    cdef Py_ssize_t i, j
    cdef const double* arow
    cdef double* orow
    for i in range(row_start, row_stop):
        arow = anchor_base + i * dim
        orow = out_base + i * out_stride
        for j in range(n_contrast):
            orow[j] = _dot(arow, contrast_base + j * dim, dim)
