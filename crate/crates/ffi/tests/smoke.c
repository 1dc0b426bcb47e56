#include <math.h>
#include <stdio.h>
#include "homogenize.h"

static double one(const double *y, size_t dim, void *user) {
    (void)y; (void)dim; (void)user;
    return 1.0;
}

int main(void) {
    HmScenario *s = NULL;
    if (hm_scenario_builtin("laminate-2d", 42, &s) != HM_OK) {
        fprintf(stderr, "builtin: %s\n", hm_last_error());
        return 1;
    }
    double a[4];
    size_t dim = 0;
    if (hm_effective_tensor(s, 0, a, 4, &dim) != HM_OK || dim != 2) {
        fprintf(stderr, "tensor: %s\n", hm_last_error());
        return 2;
    }
    hm_scenario_free(s);
    if (fabs(a[0] - sqrt(3.0)) > 2e-3 || fabs(a[3] - 2.0) > 1e-9) return 3;
    double m, e;
    if (hm_mean_value(one, NULL, 2, &m, &e) != HM_OK || fabs(m - 1.0) > 1e-12) return 4;
    if (hm_scenario_builtin("nope", 1, &s) != HM_ERR_CONFIG) return 5;
    printf("ok %s %.6f\n", hm_version(), a[0]);
    return 0;
}
