#pragma once

#include "nowcast/augment.hpp"
#include "nowcast/binning.hpp"
#include "nowcast/cli.hpp"
#include "nowcast/dataio.hpp"
#include "nowcast/error.hpp"
#include "nowcast/gradcheck.hpp"
#include "nowcast/losses.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/tensor.hpp"
#include "nowcast/unet.hpp"
