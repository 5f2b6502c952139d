#pragma once

#include <stdexcept>
#include <string>

namespace dive {

// Base of every library error. `kind()` is the stable machine-parsable tag
// the CLI prints as `error: <kind>: <message>`.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define DIVE_DEFINE_ERROR(NAME)                                        \
    class NAME : public Error {                                        \
    public:                                                            \
        explicit NAME(const std::string& message) : Error(#NAME, message) {} \
    }

DIVE_DEFINE_ERROR(ZeroNorm);
DIVE_DEFINE_ERROR(NotNormalized);
DIVE_DEFINE_ERROR(DegenerateVariance);
DIVE_DEFINE_ERROR(NonFinite);
DIVE_DEFINE_ERROR(ShapeMismatch);
DIVE_DEFINE_ERROR(CoeffOutOfRange);
DIVE_DEFINE_ERROR(IoError);
DIVE_DEFINE_ERROR(FormatError);
DIVE_DEFINE_ERROR(EmptyBatch);
DIVE_DEFINE_ERROR(LabelOutOfRange);
DIVE_DEFINE_ERROR(MissingComponent);
DIVE_DEFINE_ERROR(IncompatibleComponent);
DIVE_DEFINE_ERROR(MissingCache);
DIVE_DEFINE_ERROR(TooFew);
DIVE_DEFINE_ERROR(EmptyDataset);
DIVE_DEFINE_ERROR(EmptyGrid);
DIVE_DEFINE_ERROR(SpecInvalid);
DIVE_DEFINE_ERROR(PretrainFailed);
DIVE_DEFINE_ERROR(MissingReferenceDataset);
DIVE_DEFINE_ERROR(ConfigInvalid);
DIVE_DEFINE_ERROR(UsageError);

#undef DIVE_DEFINE_ERROR

}  // namespace dive
