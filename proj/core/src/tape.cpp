#include "povert/tape.hpp"

namespace povert::ad {

template class Tape<float>;
template class Tape<double>;

}  // namespace povert::ad
