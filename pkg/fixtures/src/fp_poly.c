/* Floating-point-bound fixture: Newton iterations for sqrt in the inner
 * loop (mul/add/div, branch-free), so double-precision work dominates.
 * Usage: fp_poly [hot_iters] [inner_iters] */

#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

uint64_t hot_cell[512] __attribute__((aligned(4096)));

int main(int argc, char **argv)
{
    long hot_iters = argc > 1 ? atol(argv[1]) : 300;
    long inner_iters = argc > 2 ? atol(argv[2]) : 5;
    double v = 1.5;
    double target = 2.0;

    hot_cell[0] = 0xFEEDFACE01020304ull;
    for (long i = 0; i < hot_iters; i++) {
        __asm__ volatile(
            ".globl hot_insn_marker\n"
            "hot_insn_marker: .byte 0x0f,0x1f,0x44,0x00,0x00"
            ::: "memory");
        hot_cell[0] = hot_cell[0] * 0x100000001B3ull + (uint64_t)i;
        target = 2.0 + (double)(i & 7);
        for (long j = 0; j < inner_iters; j++)
            v = 0.5 * (v + target / v);     /* Newton step toward sqrt */
    }
    uint64_t bits;
    memcpy(&bits, &v, sizeof bits);
    printf("%016llx\n", (unsigned long long)(bits ^ hot_cell[0]));
    exit(0);
}
