#include "deskgrid/accounting.hpp"
#include "deskgrid/container.hpp"
#include "deskgrid/directory.hpp"
#include "deskgrid/execution.hpp"
#include "deskgrid/http_api.hpp"
#include "deskgrid/models.hpp"
#include "deskgrid/provisioning.hpp"
#include "deskgrid/reservation.hpp"
#include "deskgrid/storage.hpp"

namespace deskgrid {

void register_builtins() {
    static bool done = [] {
        auto& catalog = ServiceCatalog::instance();
        catalog.add("directory", [] { return std::make_unique<directory::DirectoryService>(); });
        catalog.add("reservation", [] { return std::make_unique<resv::ReservationService>(); });
        catalog.add("allocation", [] { return std::make_unique<resv::AllocationManagerService>(); });
        catalog.add("storage", [] { return std::make_unique<store::StorageService>(); });
        catalog.add("scheduler", [] { return std::make_unique<exec::SchedulerService>(); });
        catalog.add("executor", [] { return std::make_unique<exec::ExecutorService>(); });
        catalog.add("accounting", [] { return std::make_unique<acct::AccountingService>(); });
        catalog.add("provisioning", [] { return std::make_unique<fabric::ProvisioningService>(); });
        catalog.add("http", [] { return std::make_unique<ctl::HttpApiService>(); });

        store::register_builtin_channels();
        exec::register_builtin_operations();
        models::register_mapreduce_builtins();
        return true;
    }();
    (void)done;
}

}  // namespace deskgrid
