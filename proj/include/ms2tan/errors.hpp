#pragma once

#include <stdexcept>
#include <string>

namespace ms2tan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MS2TAN_DEFINE_ERROR(Name)        \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

MS2TAN_DEFINE_ERROR(DimMismatch);
MS2TAN_DEFINE_ERROR(NonBinaryMask);
MS2TAN_DEFINE_ERROR(IndivisibleSize);
MS2TAN_DEFINE_ERROR(ShapeMismatch);
MS2TAN_DEFINE_ERROR(OddDimension);
MS2TAN_DEFINE_ERROR(EmptyRegion);
MS2TAN_DEFINE_ERROR(TooSmall);
MS2TAN_DEFINE_ERROR(UnreachableCoverage);
MS2TAN_DEFINE_ERROR(IoError);
MS2TAN_DEFINE_ERROR(FormatError);
MS2TAN_DEFINE_ERROR(GraphError);
MS2TAN_DEFINE_ERROR(NonFiniteLoss);
MS2TAN_DEFINE_ERROR(ConfigError);
MS2TAN_DEFINE_ERROR(NonMonotonicScales);

#undef MS2TAN_DEFINE_ERROR

}  // namespace ms2tan
