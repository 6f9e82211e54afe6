#ifndef MELTCAL_MELTCAL_HPP
#define MELTCAL_MELTCAL_HPP

#include "meltcal/csv.hpp"
#include "meltcal/doe.hpp"
#include "meltcal/domain.hpp"
#include "meltcal/error.hpp"
#include "meltcal/format.hpp"
#include "meltcal/forward.hpp"
#include "meltcal/inference.hpp"
#include "meltcal/parallel.hpp"
#include "meltcal/pipeline.hpp"
#include "meltcal/plots.hpp"
#include "meltcal/random.hpp"
#include "meltcal/sensitivity.hpp"
#include "meltcal/surrogate.hpp"

#endif // MELTCAL_MELTCAL_HPP
