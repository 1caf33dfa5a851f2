#include <stdio.h>
#include "wellcast.h"

int main(int argc, char **argv) {
    WcModel *model = NULL;
    WcStatus status;
    double k[2];
    const double p[4] = {0.04, 0.01, 0.01, 0.2};
    const double m[2] = {1.0, 0.0};
    char msg[256];

    if (argc < 2) {
        return 2;
    }
    status = wc_model_load(argv[1], &model);
    if (status != WC_STATUS_OK) {
        wc_last_error_message(msg, sizeof msg);
        fprintf(stderr, "%s\n", msg);
        return 1;
    }
    wc_kalman_gain(p, m, 1e-4, k);
    printf("wellcast %s gain %g %g\n", wc_version(), k[0], k[1]);
    wc_model_free(model);
    return 0;
}
