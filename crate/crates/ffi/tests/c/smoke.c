#include <stdio.h>
#include <string.h>

#include "cacovid.h"

#define CHECK(call)                                                          \
    do {                                                                     \
        CacovidStatus s_ = (call);                                           \
        if (s_ != CACOVID_STATUS_OK) {                                       \
            const char *m_ = cacovid_last_error();                           \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_, m_ ? m_ : ""); \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(void) {
    enum { FRAMES = 2, H = 2, W = 2, DIM = 4, NQ = 1, NVID = FRAMES * H * W };
    double video[NVID * DIM];
    double question[NQ * DIM];
    for (int i = 0; i < NVID * DIM; i++) video[i] = 0.1 * (double)(i % 7) - 0.3;
    for (int i = 0; i < NQ * DIM; i++) question[i] = 0.2 * (double)i - 0.1;
    CacovidGrid grid = {video, FRAMES, H, W, question, NQ, DIM};

    CacovidPolicy *policy = NULL;
    CHECK(cacovid_policy_init(DIM, 8, 3, &policy));

    double tokens[NVID], frames[FRAMES];
    CHECK(cacovid_policy_score(policy, &grid, tokens, frames));

    size_t kept[NVID], written = 0, budgets[FRAMES];
    CHECK(cacovid_compress(policy, &grid, 0.5, CACOVID_STRATEGY_FRAME_ADA, kept, NVID, &written,
                           budgets));
    if (written != 4 || budgets[0] + budgets[1] != 4) return 2;

    uint64_t flops = 0;
    CHECK(cacovid_flops(1, 1, 1, 1, &flops));
    if (flops != 8) return 3;

    if (cacovid_policy_score(NULL, &grid, tokens, frames) != CACOVID_STATUS_NULL_POINTER) return 4;
    if (cacovid_last_error() == NULL || strstr(cacovid_last_error(), "policy") == NULL) return 5;

    cacovid_policy_free(policy);
    printf("ok %zu\n", written);
    return 0;
}
