#pragma once

#include <stdexcept>
#include <string>

namespace miar {

// Every failure raised by the library carries a short category tag so the
// CLI can print a one-line "error[<category>]" diagnostic.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

#define MIAR_DEFINE_ERROR(Name, tag)                                   \
    class Name : public Error {                                        \
    public:                                                            \
        explicit Name(const std::string& what) : Error(tag, what) {}   \
    }

MIAR_DEFINE_ERROR(ShapeError, "shape");
MIAR_DEFINE_ERROR(ConfigError, "config");
MIAR_DEFINE_ERROR(ArgumentError, "argument");
MIAR_DEFINE_ERROR(DataError, "data");
MIAR_DEFINE_ERROR(IntegrityError, "integrity");
MIAR_DEFINE_ERROR(IoError, "io");
MIAR_DEFINE_ERROR(SchemaError, "schema");
MIAR_DEFINE_ERROR(CheckpointError, "checkpoint");
MIAR_DEFINE_ERROR(NumericError, "numeric");

#undef MIAR_DEFINE_ERROR

}  // namespace miar
