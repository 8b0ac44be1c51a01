#pragma once

#include <stdexcept>
#include <string>

namespace leirstd {

/// Base of every error the toolkit raises. `category()` drives CLI exit codes.
class Error : public std::runtime_error {
public:
    enum class Category { config, data, numeric, contract, io };

    Error(Category category, const std::string& what) : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }

private:
    Category category_;
};

#define LEIRSTD_DEFINE_ERROR(Name, Cat)                                        \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(Category::Cat, what) {} \
    }

// Shape and configuration problems.
LEIRSTD_DEFINE_ERROR(DimensionError, config);
LEIRSTD_DEFINE_ERROR(ConfigError, config);
LEIRSTD_DEFINE_ERROR(AccountingError, config);

// Numeric failures.
LEIRSTD_DEFINE_ERROR(NumericError, numeric);
LEIRSTD_DEFINE_ERROR(DegenerateVarianceError, numeric);
LEIRSTD_DEFINE_ERROR(DegenerateBoxError, numeric);
LEIRSTD_DEFINE_ERROR(DeterminismError, numeric);

// API misuse.
LEIRSTD_DEFINE_ERROR(ContractError, contract);

// Input data problems.
LEIRSTD_DEFINE_ERROR(DataError, data);
LEIRSTD_DEFINE_ERROR(ParseError, data);
LEIRSTD_DEFINE_ERROR(RangeError, data);
LEIRSTD_DEFINE_ERROR(RegionError, data);
LEIRSTD_DEFINE_ERROR(SplitError, data);
LEIRSTD_DEFINE_ERROR(GenerationError, data);
LEIRSTD_DEFINE_ERROR(UndefinedApError, data);

LEIRSTD_DEFINE_ERROR(IoError, io);

#undef LEIRSTD_DEFINE_ERROR

}  // namespace leirstd
