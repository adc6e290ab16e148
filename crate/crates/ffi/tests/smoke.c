#include <stdio.h>
#include "duallqr.h"

int main(void) {
    const double a[9] = {0.18, 0.1, 0.0, 0.0, 0.18, 0.04, 0.0, -0.04, 0.16};
    const double b[6] = {0.0, 1.0, 0.6, 0.0, 0.0, 0.6};
    const double q[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const double r[4] = {10, 0, 0, 1};
    DlqrSystem *sys = NULL;
    DlqrPolicy *pol = NULL;
    double cost = 0.0;
    if (dlqr_system_new(a, b, 3, 2, 0.5, &sys) != DLQR_STATUS_OK) return 1;
    if (dlqr_riccati(sys, q, r, 100, &pol, &cost) != DLQR_STATUS_OK) {
        fprintf(stderr, "%s\n", dlqr_last_error());
        return 1;
    }
    printf("%zu %f\n", dlqr_policy_len(pol), cost);
    dlqr_policy_free(pol);
    dlqr_system_free(sys);
    return 0;
}
