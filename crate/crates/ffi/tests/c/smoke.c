#include <math.h>
#include <stdio.h>
#include "lsic.h"

int main(void) {
    bool rel[4] = {false, true, false, true};
    double p = 0.0, nd = 0.0;
    if (lsic_precision_at_n(rel, 4, 4, &p) != LSIC_STATUS_OK || fabs(p - 0.5) > 1e-12) return 1;
    if (lsic_ndcg_at_n(rel, 4, 2, 4, &nd) != LSIC_STATUS_OK || !(nd > 0.0 && nd < 1.0)) return 2;
    if (lsic_precision_at_n(rel, 4, 0, &p) != LSIC_STATUS_INVALID_ARGUMENT) return 3;
    if (lsic_last_error() == NULL) return 4;
    LsicConfig *cfg = NULL;
    if (lsic_config_new(&cfg) != LSIC_STATUS_OK) return 5;
    if (lsic_config_set(cfg, "no_such_key", "1") != LSIC_STATUS_CONFIG) return 6;
    lsic_config_free(cfg);
    printf("ok\n");
    return 0;
}
