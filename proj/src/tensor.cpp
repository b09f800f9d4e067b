#include "mia/tensor.hpp"

namespace mia {

thread_local bool FlopCounter::enabled = false;
thread_local double FlopCounter::flops = 0.0;

}  // namespace mia
