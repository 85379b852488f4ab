#include <stdio.h>
#include "glimpse.h"

int main(void) {
    const char *spec = "{\"dims\":{\"L\":2,\"H\":2,\"K\":4,\"M\":1,\"T\":2},"
                       "\"planted_patches\":[1],\"signal_strength\":1.0,\"rng_seed\":9}";
    GlimpseTrace *trace = NULL;
    GlimpseExplanation *ex = NULL;
    double visual[4];
    size_t n = 0;
    if (glimpse_trace_synth(spec, &trace) != GLIMPSE_STATUS_OK) return 1;
    if (glimpse_explain(trace, NULL, &ex) != GLIMPSE_STATUS_OK) return 2;
    if (glimpse_explanation_visual(ex, visual, 4, &n) != GLIMPSE_STATUS_OK || n != 4) return 3;
    if (glimpse_trace_load("/nonexistent", &trace) != GLIMPSE_STATUS_MISSING_FILE) return 4;
    if (glimpse_last_error() == NULL) return 5;
    printf("%zu\n", n);
    glimpse_explanation_free(ex);
    glimpse_trace_free(trace);
    return 0;
}
