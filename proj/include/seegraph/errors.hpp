#pragma once

#include <stdexcept>
#include <string>

namespace seegraph {

/// Base of every error raised by the library. Carries a short category tag so
/// the CLI can map failures onto exit codes without RTTI ladders.
class Error : public std::runtime_error {
public:
    Error(const char* category, const std::string& what)
        : std::runtime_error(std::string(category) + ": " + what), category_(category) {}

    const char* category() const noexcept { return category_; }

private:
    const char* category_;
};

#define SEEGRAPH_DEFINE_ERROR(Name)                                        \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(#Name, what) {}     \
    }

SEEGRAPH_DEFINE_ERROR(ShapeError);
SEEGRAPH_DEFINE_ERROR(DomainError);
SEEGRAPH_DEFINE_ERROR(ContractError);
SEEGRAPH_DEFINE_ERROR(NumericalError);
SEEGRAPH_DEFINE_ERROR(ConfigError);
SEEGRAPH_DEFINE_ERROR(ValidationError);
SEEGRAPH_DEFINE_ERROR(FormatError);
SEEGRAPH_DEFINE_ERROR(InsufficientDataError);
SEEGRAPH_DEFINE_ERROR(EmptyBandError);
SEEGRAPH_DEFINE_ERROR(TrainingError);
SEEGRAPH_DEFINE_ERROR(UsageError);

#undef SEEGRAPH_DEFINE_ERROR

}  // namespace seegraph
