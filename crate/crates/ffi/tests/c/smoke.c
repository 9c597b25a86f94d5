#include <math.h>
#include <stdio.h>
#include <string.h>

#include "rdspde.h"

int main(void) {
    RdsModel *m = NULL;
    if (rds_model_new(RDS_PRESET_OU_LINEAR, 16, 16, 0.0, 1.0, &m) != RDS_STATUS_OK) {
        fprintf(stderr, "model: %s\n", rds_last_error());
        return 1;
    }
    size_t n = rds_model_grid(m);
    double x0[16], u[16], v[16];
    for (size_t j = 0; j < n; j++) {
        x0[j] = sqrt(2.0) * sin(M_PI * (double)(j + 1) / (double)(n + 1));
    }
    if (rds_simulate(m, x0, n, 0.01, 0.1, 1, 0, u) != RDS_STATUS_OK ||
        rds_simulate(m, x0, n, 0.01, 0.1, 1, 0, v) != RDS_STATUS_OK) {
        fprintf(stderr, "simulate: %s\n", rds_last_error());
        return 1;
    }
    if (memcmp(u, v, sizeof u) != 0) {
        fprintf(stderr, "same seed gave different paths\n");
        return 1;
    }
    double mean = 0.0, se = 0.0;
    if (rds_estimate_pt_mode(m, x0, n, RDS_CHI_IDENTITY, 1, 0.1, 0.01, 2000, 4, &mean, &se) != RDS_STATUS_OK) {
        fprintf(stderr, "estimate: %s\n", rds_last_error());
        return 1;
    }
    double exact = exp(-M_PI * M_PI * 0.1);
    if (fabs(mean - exact) > 4.0 * se) {
        fprintf(stderr, "mean %g +- %g vs %g\n", mean, se, exact);
        return 1;
    }
    if (rds_simulate(NULL, x0, n, 0.01, 0.1, 1, 0, u) != RDS_STATUS_NULL_POINTER || strlen(rds_last_error()) == 0) {
        return 1;
    }
    rds_model_free(m);
    printf("ok %s\n", rds_version());
    return 0;
}
