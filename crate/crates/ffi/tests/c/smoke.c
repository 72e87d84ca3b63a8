#include <stdio.h>
#include <string.h>
#include "gradleak.h"

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    GlModel *model = NULL;
    if (gl_model_load("/nonexistent/model.ck", &model) != GL_STATUS_IO) return 3;
    char msg[256];
    if (gl_last_error(msg, sizeof msg) == 0) return 4;
    if (gl_model_load(argv[1], &model) != GL_STATUS_OK) return 5;
    size_t m = 0;
    if (gl_model_ir_dim(model, &m) != GL_STATUS_OK || m == 0) return 6;
    GlScanSummary s;
    if (gl_model_scan(model, 1e-6, 0.5, &s) != GL_STATUS_OK) return 7;
    printf("ir_dim=%zu anomalous=%d vectors=%zu\n", m, s.anomalous ? 1 : 0, s.total_vectors);
    gl_model_free(model);
    double sigma = 0.0;
    if (gl_dp_sigma(1.0, 1e-5, 1.0, &sigma) != GL_STATUS_OK || sigma <= 0.0) return 8;
    if (gl_model_ir_dim(NULL, &m) != GL_STATUS_NULL_POINTER) return 9;
    return 0;
}
