#include "cryoforge/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cryoforge {

void set_num_threads(int n) {
    if (n < 1) n = 1;
#ifdef _OPENMP
    omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace cryoforge
