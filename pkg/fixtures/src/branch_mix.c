/* Branch-heavy fixture: the inner loop takes data-dependent branches on an
 * LCG stream, stressing trap techniques with irregular control flow.
 * Usage: branch_mix [hot_iters] [inner_iters] */

#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

uint64_t hot_cell[512] __attribute__((aligned(4096)));

int main(int argc, char **argv)
{
    long hot_iters = argc > 1 ? atol(argv[1]) : 300;
    long inner_iters = argc > 2 ? atol(argv[2]) : 5;
    uint64_t lcg = 0x2545F4914F6CDD1Dull;
    uint64_t even = 0, odd = 0, high = 0;

    hot_cell[0] = 0x1122334455667788ull;
    for (long i = 0; i < hot_iters; i++) {
        __asm__ volatile(
            ".globl hot_insn_marker\n"
            "hot_insn_marker: .byte 0x0f,0x1f,0x44,0x00,0x00"
            ::: "memory");
        hot_cell[0] ^= (even << 1) ^ odd ^ (uint64_t)i;
        for (long j = 0; j < inner_iters; j++) {
            lcg = lcg * 6364136223846793005ull + 1442695040888963407ull;
            if (lcg & 1)
                odd += lcg >> 7;
            else
                even += lcg >> 9;
            if (lcg >> 63)
                high++;
            else if ((lcg >> 16 & 0xFF) < 0x40)
                odd ^= even;
        }
    }
    printf("%016llx\n",
           (unsigned long long)(hot_cell[0] ^ even ^ odd ^ (high << 32)));
    exit(0);
}
