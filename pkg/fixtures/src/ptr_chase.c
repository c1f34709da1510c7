/* Memory-bound fixture: the inner loop chases a pointer cycle through a
 * shuffled 16 KiB table (deterministic Sattolo shuffle at startup), defeating
 * prefetch.  Usage: ptr_chase [hot_iters] [inner_iters] */

#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

#define TABLE_SIZE 4096

uint64_t hot_cell[512] __attribute__((aligned(4096)));
static uint32_t table[TABLE_SIZE];

static uint64_t rng_state = 0x853C49E6748FEA9Bull;

static uint32_t rng_below(uint32_t bound)
{
    rng_state = rng_state * 6364136223846793005ull + 1442695040888963407ull;
    return (uint32_t)((rng_state >> 33) % bound);
}

static void build_cycle(void)
{
    for (uint32_t i = 0; i < TABLE_SIZE; i++)
        table[i] = i;
    for (uint32_t i = TABLE_SIZE - 1; i > 0; i--) {   /* Sattolo: one cycle */
        uint32_t j = rng_below(i);
        uint32_t tmp = table[i];
        table[i] = table[j];
        table[j] = tmp;
    }
}

int main(int argc, char **argv)
{
    long hot_iters = argc > 1 ? atol(argv[1]) : 300;
    long inner_iters = argc > 2 ? atol(argv[2]) : 5;
    uint32_t pos = 0;

    build_cycle();
    hot_cell[0] = 0xABCDEF0123456789ull;
    for (long i = 0; i < hot_iters; i++) {
        __asm__ volatile(
            ".globl hot_insn_marker\n"
            "hot_insn_marker: .byte 0x0f,0x1f,0x44,0x00,0x00"
            ::: "memory");
        hot_cell[0] += pos + (uint64_t)i;
        for (long j = 0; j < inner_iters; j++)
            pos = table[pos];
    }
    printf("%016llx\n", (unsigned long long)(hot_cell[0] + pos));
    exit(0);
}
