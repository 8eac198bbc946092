#pragma once

// Convenience umbrella: the whole library in one include.

#include "mkid/bessel.hpp"
#include "mkid/conductivity.hpp"
#include "mkid/constants.hpp"
#include "mkid/dft.hpp"
#include "mkid/errors.hpp"
#include "mkid/gap_fit.hpp"
#include "mkid/io.hpp"
#include "mkid/iq_cal.hpp"
#include "mkid/levmar.hpp"
#include "mkid/optimum_filter.hpp"
#include "mkid/poly.hpp"
#include "mkid/pulse_dsp.hpp"
#include "mkid/resonance.hpp"
#include "mkid/rng.hpp"
#include "mkid/spectrum.hpp"
#include "mkid/synthgen.hpp"
