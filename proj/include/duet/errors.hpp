#pragma once

#include <stdexcept>
#include <string>

namespace duet {

/// Base class for every domain error thrown by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define DUET_DEFINE_ERROR(NAME)                                    \
  class NAME : public Error {                                      \
  public:                                                          \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

DUET_DEFINE_ERROR(ZeroNorm);
DUET_DEFINE_ERROR(NotScalar);
DUET_DEFINE_ERROR(ShapeMismatch);
DUET_DEFINE_ERROR(BadLabel);
DUET_DEFINE_ERROR(BadRange);
DUET_DEFINE_ERROR(BadConcepts);
DUET_DEFINE_ERROR(BadSpec);
DUET_DEFINE_ERROR(BadDims);
DUET_DEFINE_ERROR(BadTau);
DUET_DEFINE_ERROR(IndivisibleBatch);
DUET_DEFINE_ERROR(OffsetMismatch);
DUET_DEFINE_ERROR(BadStep);
DUET_DEFINE_ERROR(ConfigInvalid);
DUET_DEFINE_ERROR(BadRepeatCount);
DUET_DEFINE_ERROR(GroupTooSmall);
DUET_DEFINE_ERROR(DuplicateLabels);
DUET_DEFINE_ERROR(TooFewClasses);
DUET_DEFINE_ERROR(LengthMismatch);
DUET_DEFINE_ERROR(IoError);

#undef DUET_DEFINE_ERROR

}  // namespace duet
