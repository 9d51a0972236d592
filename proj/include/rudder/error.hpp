#pragma once

#include <stdexcept>
#include <string>

namespace rudder {

/// Base of every error the engine raises. `kind()` is a stable name used in
/// CLI diagnostics and tests.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define RUDDER_DEFINE_ERROR(Name)                                         \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(#Name, what) {}    \
    }

RUDDER_DEFINE_ERROR(InvalidArgument);
RUDDER_DEFINE_ERROR(ZeroNormInput);
RUDDER_DEFINE_ERROR(EmptyPool);
RUDDER_DEFINE_ERROR(DimMismatch);
RUDDER_DEFINE_ERROR(InvalidConfig);
RUDDER_DEFINE_ERROR(CacheOverflow);
RUDDER_DEFINE_ERROR(SequenceTooLong);
RUDDER_DEFINE_ERROR(DegenerateDirection);
RUDDER_DEFINE_ERROR(NonUnitDirection);
RUDDER_DEFINE_ERROR(SpanExceedsContext);
RUDDER_DEFINE_ERROR(CapacityExceeded);
RUDDER_DEFINE_ERROR(InsufficientTokens);
RUDDER_DEFINE_ERROR(ConfigError);
RUDDER_DEFINE_ERROR(IoError);

#undef RUDDER_DEFINE_ERROR

}  // namespace rudder
