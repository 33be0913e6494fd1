/* Minimal test harness: per-check counters and one summary line. */
#ifndef CHECK_H
#define CHECK_H

#include <stdio.h>

static int check_failed = 0;
static int check_total = 0;

#define CHECK(cond)                                                        \
    do {                                                                   \
        check_total++;                                                     \
        if (!(cond)) {                                                     \
            check_failed++;                                                \
            printf("FAIL %s:%d: %s\n", __FILE__, __LINE__, #cond);         \
        }                                                                  \
    } while (0)

#define CHECK_EQ(got, want)                                                \
    do {                                                                   \
        long check_g = (long)(got);                                        \
        long check_w = (long)(want);                                       \
        check_total++;                                                     \
        if (check_g != check_w) {                                          \
            check_failed++;                                                \
            printf("FAIL %s:%d: %s == %ld, want %ld\n", __FILE__,          \
                   __LINE__, #got, check_g, check_w);                      \
        }                                                                  \
    } while (0)

static int check_summary(const char *name)
{
    if (check_failed) {
        printf("%s: %d of %d checks failed\n", name, check_failed,
               check_total);
        return 1;
    }
    printf("%s: %d checks passed\n", name, check_total);
    return 0;
}

#endif /* CHECK_H */
