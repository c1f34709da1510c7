/* Integer-bound fixture: xorshift mixing in the hot loop, LCG busy work in
 * the inner loop.  Usage: int_mix [hot_iters] [inner_iters]
 *
 * The hot marker is a 5-byte straight-line nop executed exactly hot_iters
 * times; hot_cell[0] is read once and written once per hot iteration and
 * owns its page.  Output is a deterministic 16-digit hex checksum. */

#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

uint64_t hot_cell[512] __attribute__((aligned(4096)));

static uint64_t mix(uint64_t x, uint64_t i)
{
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    x += 0x9E3779B97F4A7C15ull * (i | 1);
    return x;
}

int main(int argc, char **argv)
{
    long hot_iters = argc > 1 ? atol(argv[1]) : 300;
    long inner_iters = argc > 2 ? atol(argv[2]) : 5;
    uint64_t acc = 0x243F6A8885A308D3ull;

    hot_cell[0] = 0xC0FFEE1234567890ull;
    for (long i = 0; i < hot_iters; i++) {
        __asm__ volatile(
            ".globl hot_insn_marker\n"
            "hot_insn_marker: .byte 0x0f,0x1f,0x44,0x00,0x00"
            ::: "memory");
        hot_cell[0] = mix(hot_cell[0], (uint64_t)i);
        for (long j = 0; j < inner_iters; j++)
            acc = acc * 6364136223846793005ull + 1442695040888963407ull;
    }
    printf("%016llx\n", (unsigned long long)(acc ^ hot_cell[0]));
    exit(0);
}
